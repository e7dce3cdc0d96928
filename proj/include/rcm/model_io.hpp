#pragma once

#include <algorithm>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rcm/checkpoint.hpp"
#include "rcm/model.hpp"

namespace rcm {

/// Model persistence: tensors go into the binary checkpoint container,
/// architecture and task registry into a JSON sidecar `<path>.meta.json`.
/// Round trips are byte-identical; optimizer momentum is not persisted.
namespace model_io {

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::WeightedBce: return "weighted-bce";
    case LossKind::CrossEntropy: return "cross-entropy";
    case LossKind::L1: return "l1";
  }
  throw Error("bad loss kind");
}
inline LossKind loss_from_name(const std::string& s) {
  if (s == "weighted-bce") return LossKind::WeightedBce;
  if (s == "cross-entropy") return LossKind::CrossEntropy;
  if (s == "l1") return LossKind::L1;
  throw Error("unknown loss: " + s);
}
inline const char* metric_name(MetricKind k) {
  switch (k) {
    case MetricKind::MIoU: return "miou";
    case MetricKind::MeanErr: return "mean_err";
    case MetricKind::Rmse: return "rmse";
    case MetricKind::F1Edge: return "f1_edge";
    case MetricKind::Accuracy: return "accuracy";
  }
  throw Error("bad metric kind");
}
inline MetricKind metric_from_name(const std::string& s) {
  if (s == "miou") return MetricKind::MIoU;
  if (s == "mean_err") return MetricKind::MeanErr;
  if (s == "rmse") return MetricKind::Rmse;
  if (s == "f1_edge") return MetricKind::F1Edge;
  if (s == "accuracy") return MetricKind::Accuracy;
  throw Error("unknown metric: " + s);
}

inline nlohmann::ordered_json backbone_to_json(const BackboneSpec& spec) {
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : spec.layers)
    layers.push_back({{"in_ch", l.in_ch},
                      {"out_ch", l.out_ch},
                      {"k", l.k},
                      {"stride", l.stride},
                      {"pad", l.pad},
                      {"relu", l.relu}});
  return {{"image_size", spec.image_size},
          {"num_classes", spec.num_classes},
          {"layers", layers}};
}

inline BackboneSpec backbone_from_json(const nlohmann::json& j) {
  BackboneSpec spec;
  spec.image_size = j.value("image_size", 64);
  spec.num_classes = j.value("num_classes", 3);
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.in_ch = lj.at("in_ch").get<int>();
    l.out_ch = lj.at("out_ch").get<int>();
    l.k = lj.value("k", 3);
    l.stride = lj.value("stride", 1);
    l.pad = lj.value("pad", l.k / 2);
    l.relu = lj.value("relu", true);
    spec.layers.push_back(l);
  }
  return spec;
}

inline nlohmann::ordered_json task_spec_to_json(const TaskSpec& t) {
  return {{"id", t.id},
          {"label", t.label},
          {"head_kind", t.head.kind == HeadSpec::Kind::Dense ? "dense" : "classifier"},
          {"head_channels", t.head.out_channels},
          {"loss", loss_name(t.loss)},
          {"loss_weight", t.loss_weight},
          {"bce_pos_weight", t.bce_pos_weight},
          {"bce_neg_weight", t.bce_neg_weight},
          {"metric", metric_name(t.metric)},
          {"lower_better", t.lower_better}};
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec t;
  t.id = j.at("id").get<std::string>();
  t.label = j.value("label", t.id);
  t.head.kind = j.value("head_kind", std::string("dense")) == "dense"
                    ? HeadSpec::Kind::Dense
                    : HeadSpec::Kind::Classifier;
  t.head.out_channels = j.at("head_channels").get<int>();
  t.loss = loss_from_name(j.at("loss").get<std::string>());
  t.loss_weight = j.value("loss_weight", 1.0f);
  t.bce_pos_weight = j.value("bce_pos_weight", 0.95f);
  t.bce_neg_weight = j.value("bce_neg_weight", 0.05f);
  t.metric = metric_from_name(j.at("metric").get<std::string>());
  t.lower_better = j.value("lower_better", false);
  return t;
}

inline void save(Model& model, const std::string& path) {
  nlohmann::ordered_json meta;
  meta["format_version"] = 1;
  meta["seed"] = model.seed();
  meta["factored"] = model.factored();
  meta["nff"] = model.nff();
  meta["frozen"] = model.frozen();
  meta["bn_momentum"] = model.bn_momentum();
  meta["backbone"] = backbone_to_json(model.spec());

  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const auto& [id, entry] : model.tasks()) {
    if (id == kPretrainTask) continue;
    nlohmann::ordered_json tj = task_spec_to_json(entry.spec);
    tj["mode"] = mode_name(entry.mode);
    tasks.push_back(tj);
  }
  meta["tasks"] = tasks;

  nlohmann::ordered_json rcm_layers = nlohmann::ordered_json::array();
  for (size_t i = 0; i < model.layers().size(); ++i) {
    const auto& layer = model.layers()[i];
    if (!layer.rcm) continue;
    rcm_layers.push_back({{"index", i},
                          {"bank", layer.rcm->bank()},
                          {"has_default_init", layer.rcm->default_init().has_value()},
                          {"has_pretrain_modulator", layer.rcm->has_task(kPretrainTask)}});
  }
  meta["rcm_layers"] = rcm_layers;

  std::vector<std::pair<std::string, ckpt::AnyTensor>> entries;
  for (auto& [name, t] : model.named_state()) entries.emplace_back(name, *t);
  for (size_t i = 0; i < model.layers().size(); ++i) {
    const auto& layer = model.layers()[i];
    if (layer.rcm && layer.rcm->default_init())
      entries.emplace_back("layers." + std::to_string(i) + ".rcm.default_init",
                           *layer.rcm->default_init());
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  ckpt::save(path, entries);
  std::ofstream(path + ".meta.json") << meta.dump(2) << "\n";
}

inline std::unique_ptr<Model> load(const std::string& path) {
  std::ifstream mf(path + ".meta.json");
  if (!mf) throw Error("model load: missing sidecar " + path + ".meta.json");
  nlohmann::json meta = nlohmann::json::parse(mf);
  if (meta.value("format_version", 0) != 1)
    throw Error("model load: unsupported meta format version");

  BackboneSpec spec = backbone_from_json(meta.at("backbone"));
  auto model = std::make_unique<Model>(spec, meta.value("seed", uint64_t{0}),
                                       meta.value("factored", false),
                                       meta.value("nff", true));
  model->set_bn_momentum(meta.value("bn_momentum", 0.1f));
  if (meta.value("frozen", false)) model->freeze_backbone();

  // Rebuild decomposed layers (placeholder values, overwritten from the
  // checkpoint) so task registration lands on the right structure.
  for (const auto& rj : meta.value("rcm_layers", nlohmann::json::array())) {
    size_t idx = rj.at("index").get<size_t>();
    if (idx >= model->layers().size()) throw Error("model load: bad rcm layer index");
    BackboneLayer& layer = model->layers()[idx];
    int bank = rj.at("bank").get<int>();
    const LayerSpec& ls = layer.spec;
    if (!layer.rcm) {
      Tensor bank_w({bank, ls.in_ch, ls.k, ls.k});
      layer.rcm.emplace("layers." + std::to_string(idx) + ".rcm", std::move(bank_w),
                        ls.stride, ls.pad, ls.out_ch, model->nff(),
                        /*bank_trainable=*/false);
    } else if (layer.rcm->bank() != bank) {
      throw Error("model load: rcm bank mismatch");
    }
    if (rj.value("has_default_init", false) && !layer.rcm->default_init()) {
      Tensor u({ls.out_ch, bank});
      u.data.assign(u.data.size(), 1.0f);  // nonzero rows keep NFF init valid
      layer.rcm->set_default_init(std::move(u));
    }
    if (rj.value("has_pretrain_modulator", false) && !layer.rcm->has_task(kPretrainTask)) {
      Tensor rows({ls.out_ch, bank});
      rows.data.assign(rows.data.size(), 1.0f);
      Tensor bias({ls.out_ch});
      layer.rcm->add_task(kPretrainTask, ModulatorInit::Given, &rows, &bias);
    }
  }

  for (const auto& tj : meta.value("tasks", nlohmann::json::array()))
    model->register_task(task_spec_from_json(tj),
                         mode_from_name(tj.at("mode").get<std::string>()));

  auto entries = ckpt::load(path);
  auto state = model->named_state();
  std::set<std::string> written;
  for (auto& [name, any] : entries) {
    if (!std::holds_alternative<Tensor>(any))
      throw Error("model load: unexpected f64 tensor " + name);
    Tensor& src = std::get<Tensor>(any);
    auto it = state.find(name);
    if (it == state.end()) {
      const std::string suffix = ".rcm.default_init";
      if (name.size() > suffix.size() &&
          name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        size_t idx = std::stoul(name.substr(std::string("layers.").size()));
        if (idx >= model->layers().size() || !model->layers()[idx].rcm)
          throw Error("model load: stray default init " + name);
        model->layers()[idx].rcm->set_default_init(src);
        continue;
      }
      throw Error("model load: unexpected tensor " + name);
    }
    Tensor& dst = *it->second;
    if (dst.shape != src.shape)
      throw Error("model load: shape mismatch for " + name + " (" + shape_str(dst.shape) +
                  " vs " + shape_str(src.shape) + ")");
    dst = std::move(src);
    written.insert(name);
  }
  for (const auto& [name, t] : state)
    if (!written.count(name)) throw Error("model load: missing tensor " + name);
  return model;
}

}  // namespace model_io
}  // namespace rcm
