#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcm/checkpoint.hpp"
#include "rcm/rng.hpp"
#include "rcm/tensor.hpp"

namespace rcm {

inline constexpr int kNumShapeClasses = 3;  // circle, square, triangle
inline constexpr int kSemsegClasses = kNumShapeClasses + 1;
inline constexpr int kPartsClasses = 2 * kNumShapeClasses + 1;

struct SceneConfig {
  int image_size = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  int min_half_size = 0;  // 0: derived as image_size / 10
  int max_half_size = 0;  // 0: derived as image_size / 4
  float noise_std = 0.05f;
  uint64_t seed = 1;
};

/// One scene with dense labels for every task plus the classification proxy.
/// All labels are rasterized at integer precision; noise touches the image
/// only.
struct MultiTaskSample {
  Tensor image;      // [3,H,W]
  Tensor semseg;     // [H,W], class ids 0..3
  Tensor parts;      // [H,W], class ids 0..6 (each shape split into halves)
  Tensor edge;       // [H,W], {0,1}
  Tensor normals2d;  // [2,H,W], unit vectors on foreground, 0 elsewhere
  Tensor saliency;   // [H,W], {0,1} foreground mask
  Tensor depth;      // [H,W], size-rank proxy in (0,1], background 1
  Tensor class_label;  // [1], dominant shape class 0..2
};

/// Morphological boundary of a class map: marked where any 4-neighbor
/// (in bounds) carries a different class. This is the constructional
/// definition the edge task is labeled with.
inline Tensor boundary_map(const Tensor& semseg) {
  const int h = semseg.dim(0), w = semseg.dim(1);
  Tensor edge({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int c = static_cast<int>(semseg.at2(y, x));
      bool b = (y > 0 && static_cast<int>(semseg.at2(y - 1, x)) != c) ||
               (y + 1 < h && static_cast<int>(semseg.at2(y + 1, x)) != c) ||
               (x > 0 && static_cast<int>(semseg.at2(y, x - 1)) != c) ||
               (x + 1 < w && static_cast<int>(semseg.at2(y, x + 1)) != c);
      edge.at2(y, x) = b ? 1.0f : 0.0f;
    }
  return edge;
}

namespace detail {

struct Shape {
  int cls;  // 0 circle, 1 square, 2 triangle
  int cx, cy, r;
};

inline bool covers(const Shape& s, int x, int y) {
  switch (s.cls) {
    case 0:
      return (x - s.cx) * (x - s.cx) + (y - s.cy) * (y - s.cy) <= s.r * s.r;
    case 1:
      return std::abs(x - s.cx) <= s.r && std::abs(y - s.cy) <= s.r;
    case 2: {
      // upward triangle, apex (cx, cy-r), base at cy+r; integer scanline
      if (y < s.cy - s.r || y > s.cy + s.r) return false;
      int hw = (y - s.cy + s.r) / 2;
      return std::abs(x - s.cx) <= hw;
    }
  }
  return false;
}

}  // namespace detail

inline MultiTaskSample generate_sample(const SceneConfig& cfg, uint64_t sample_seed) {
  const int S = cfg.image_size;
  if (S < 16) throw Error("generate: image size must be >= 16");
  const int rmin = cfg.min_half_size > 0 ? cfg.min_half_size : S / 10;
  const int rmax = cfg.max_half_size > 0 ? cfg.max_half_size : S / 4;
  Rng rng(sample_seed);

  int count = rng.next_int(cfg.min_shapes, cfg.max_shapes);
  std::vector<detail::Shape> shapes;
  for (int i = 0; i < count; ++i) {
    detail::Shape s;
    s.cls = rng.next_int(kNumShapeClasses);
    s.r = rng.next_int(rmin, rmax);
    s.cx = rng.next_int(s.r, S - 1 - s.r);
    s.cy = rng.next_int(s.r, S - 1 - s.r);
    shapes.push_back(s);
  }

  MultiTaskSample out;
  out.semseg = Tensor({S, S});
  out.parts = Tensor({S, S});
  out.saliency = Tensor({S, S});
  out.depth = Tensor({S, S}, 1.0f);
  out.normals2d = Tensor({2, S, S});
  out.image = Tensor({3, S, S});
  out.class_label = Tensor({1});

  // later shapes overdraw earlier ones
  std::vector<int> owner(static_cast<size_t>(S) * S, -1);
  for (int i = 0; i < count; ++i)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x)
        if (detail::covers(shapes[static_cast<size_t>(i)], x, y))
          owner[static_cast<size_t>(y) * S + x] = i;

  std::vector<int> area(static_cast<size_t>(count), 0);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      int o = owner[static_cast<size_t>(y) * S + x];
      if (o < 0) continue;
      const detail::Shape& s = shapes[static_cast<size_t>(o)];
      area[static_cast<size_t>(o)]++;
      out.semseg.at2(y, x) = static_cast<float>(s.cls + 1);
      out.parts.at2(y, x) = static_cast<float>(2 * s.cls + (y >= s.cy ? 2 : 1));
      out.saliency.at2(y, x) = 1.0f;
    }

  // depth: larger visible shapes rank closer (smaller value)
  std::vector<int> vis;
  for (int i = 0; i < count; ++i)
    if (area[static_cast<size_t>(i)] > 0) vis.push_back(i);
  std::sort(vis.begin(), vis.end(), [&shapes](int a, int b) {
    if (shapes[static_cast<size_t>(a)].r != shapes[static_cast<size_t>(b)].r)
      return shapes[static_cast<size_t>(a)].r > shapes[static_cast<size_t>(b)].r;
    return a < b;
  });
  std::vector<float> shape_depth(static_cast<size_t>(count), 1.0f);
  for (size_t rank = 0; rank < vis.size(); ++rank)
    shape_depth[static_cast<size_t>(vis[rank])] =
        static_cast<float>(rank + 1) / static_cast<float>(vis.size() + 1);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      int o = owner[static_cast<size_t>(y) * S + x];
      if (o >= 0) out.depth.at2(y, x) = shape_depth[static_cast<size_t>(o)];
    }

  out.edge = boundary_map(out.semseg);

  // normals: direction from each foreground pixel to the nearest background
  // pixel (integer distances, ties by scan order)
  std::vector<std::pair<int, int>> bg;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      if (owner[static_cast<size_t>(y) * S + x] < 0) bg.emplace_back(y, x);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      if (owner[static_cast<size_t>(y) * S + x] < 0) continue;
      int best_d = INT32_MAX, bdy = 0, bdx = 1;
      for (const auto& [by, bx] : bg) {
        int dy = by - y, dx = bx - x;
        int d = dy * dy + dx * dx;
        if (d < best_d) {
          best_d = d;
          bdy = dy;
          bdx = dx;
        }
      }
      float len = bg.empty() ? 1.0f : std::sqrt(static_cast<float>(best_d));
      if (bg.empty()) {
        bdx = 1;
        bdy = 0;
      }
      out.normals2d.data[(static_cast<size_t>(0) * S + y) * S + x] = bdx / len;
      out.normals2d.data[(static_cast<size_t>(1) * S + y) * S + x] = bdy / len;
    }

  // dominant class: the largest visible shape by nominal size. Size and
  // class are drawn independently, so the label distribution stays uniform
  // (visible-area dominance would skew toward wide-footprint classes).
  out.class_label[0] = static_cast<float>(shapes[static_cast<size_t>(vis.front())].cls);

  // image: per-class colors with per-shape brightness, noise on image only
  static const float palette[4][3] = {
      {0.05f, 0.05f, 0.05f}, {0.85f, 0.25f, 0.20f}, {0.20f, 0.80f, 0.25f}, {0.20f, 0.30f, 0.85f}};
  std::vector<float> brightness(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    brightness[static_cast<size_t>(i)] = static_cast<float>(rng.next_uniform(0.7, 1.0));
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      int o = owner[static_cast<size_t>(y) * S + x];
      int cls = o < 0 ? 0 : shapes[static_cast<size_t>(o)].cls + 1;
      float br = o < 0 ? 1.0f : brightness[static_cast<size_t>(o)];
      for (int c = 0; c < 3; ++c)
        out.image.data[(static_cast<size_t>(c) * S + y) * S + x] = palette[cls][c] * br;
    }
  if (cfg.noise_std > 0)
    for (float& v : out.image.data)
      v = std::clamp(v + static_cast<float>(rng.next_normal(0.0, cfg.noise_std)), 0.0f, 1.0f);

  return out;
}

struct Dataset {
  SceneConfig config;
  std::vector<MultiTaskSample> samples;
};

inline Dataset generate_dataset(const SceneConfig& cfg, int count) {
  if (count < 1) throw Error("generate_dataset: count must be >= 1");
  Dataset ds;
  ds.config = cfg;
  ds.samples.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i)
    ds.samples.push_back(generate_sample(cfg, Rng::derive(cfg.seed, static_cast<uint64_t>(i))));
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset persistence: per-sample binary blobs plus a JSON manifest.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json scene_config_to_json(const SceneConfig& c) {
  return {{"image_size", c.image_size},   {"min_shapes", c.min_shapes},
          {"max_shapes", c.max_shapes},   {"min_half_size", c.min_half_size},
          {"max_half_size", c.max_half_size}, {"noise_std", c.noise_std},
          {"seed", c.seed}};
}

inline SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.min_shapes = j.value("min_shapes", c.min_shapes);
  c.max_shapes = j.value("max_shapes", c.max_shapes);
  c.min_half_size = j.value("min_half_size", c.min_half_size);
  c.max_half_size = j.value("max_half_size", c.max_half_size);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline std::string sample_blob_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05d.rcmc", index);
  return buf;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest = {{"format_version", 1},
                                     {"seed", ds.config.seed},
                                     {"count", ds.samples.size()},
                                     {"config", scene_config_to_json(ds.config)}};
  std::ofstream(dir + "/manifest.json") << manifest.dump(2) << "\n";
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const MultiTaskSample& s = ds.samples[i];
    ckpt::save(dir + "/" + sample_blob_name(static_cast<int>(i)),
               {{"image", s.image},
                {"semseg", s.semseg},
                {"parts", s.parts},
                {"edge", s.edge},
                {"normals2d", s.normals2d},
                {"saliency", s.saliency},
                {"depth", s.depth},
                {"class_label", s.class_label}});
  }
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw Error("dataset: missing manifest in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  Dataset ds;
  ds.config = scene_config_from_json(manifest.at("config"));
  int count = manifest.at("count").get<int>();
  for (int i = 0; i < count; ++i) {
    auto entries = ckpt::load(dir + "/" + sample_blob_name(i));
    MultiTaskSample s;
    for (auto& [name, t] : entries) {
      Tensor* dst = name == "image"       ? &s.image
                    : name == "semseg"    ? &s.semseg
                    : name == "parts"     ? &s.parts
                    : name == "edge"      ? &s.edge
                    : name == "normals2d" ? &s.normals2d
                    : name == "saliency"  ? &s.saliency
                    : name == "depth"     ? &s.depth
                    : name == "class_label" ? &s.class_label
                                            : nullptr;
      if (!dst) throw Error("dataset: unexpected entry " + name);
      *dst = std::get<Tensor>(t);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace rcm
