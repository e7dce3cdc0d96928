#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rcm/layers.hpp"
#include "rcm/rng.hpp"

namespace rcm {

inline constexpr const char* kPretrainTask = "__pretrain__";

enum class AdaptationMode {
  FreezeEncoder,
  TaskSpecificBN,
  TaskSpecificConv,
  SingleTask,
  RCM,
  SeriesRA,
  ParallelRA,
};

inline const char* mode_name(AdaptationMode m) {
  switch (m) {
    case AdaptationMode::FreezeEncoder: return "freeze";
    case AdaptationMode::TaskSpecificBN: return "bn-only";
    case AdaptationMode::TaskSpecificConv: return "conv-only";
    case AdaptationMode::SingleTask: return "single";
    case AdaptationMode::RCM: return "rcm";
    case AdaptationMode::SeriesRA: return "series-ra";
    case AdaptationMode::ParallelRA: return "parallel-ra";
  }
  throw Error("bad mode");
}

inline AdaptationMode mode_from_name(const std::string& s) {
  if (s == "freeze") return AdaptationMode::FreezeEncoder;
  if (s == "bn-only") return AdaptationMode::TaskSpecificBN;
  if (s == "conv-only") return AdaptationMode::TaskSpecificConv;
  if (s == "single") return AdaptationMode::SingleTask;
  if (s == "rcm") return AdaptationMode::RCM;
  if (s == "series-ra") return AdaptationMode::SeriesRA;
  if (s == "parallel-ra") return AdaptationMode::ParallelRA;
  throw Error("unknown adaptation mode: " + s);
}

enum class LossKind { WeightedBce, CrossEntropy, L1 };
enum class MetricKind { MIoU, MeanErr, Rmse, F1Edge, Accuracy };

struct HeadSpec {
  enum class Kind { Dense, Classifier };
  Kind kind = Kind::Dense;
  int out_channels = 1;
};

struct TaskSpec {
  TaskId id;
  std::string label;  // dataset label field; defaults to the task id
  HeadSpec head;
  LossKind loss = LossKind::CrossEntropy;
  float loss_weight = 1.0f;
  float bce_pos_weight = 0.95f;  // class weights for WeightedBce
  float bce_neg_weight = 0.05f;
  MetricKind metric = MetricKind::MIoU;
  bool lower_better = false;
};

struct LayerSpec {
  int in_ch = 3;
  int out_ch = 8;
  int k = 3;
  int stride = 1;
  int pad = 1;
  bool relu = true;
};

struct BackboneSpec {
  std::vector<LayerSpec> layers;
  int image_size = 64;
  int num_classes = 3;  // classification pretraining proxy

  int out_channels() const { return layers.back().out_ch; }
  int total_stride() const {
    int s = 1;
    for (const auto& l : layers) s *= l.stride;
    return s;
  }
};

/// Per-task prediction head: a single 1x1 conv (+ nearest upsample back to
/// input resolution) for dense tasks, global-average-pool + linear for
/// classification.
struct Head {
  HeadSpec spec;
  Parameter w;
  Parameter b;
  int upsample = 1;
};

/// One backbone block: conv -> BN -> (relu). The plain conv weights are the
/// pretrained source shared by all adaptation modes; task-specific state
/// (BNs, conv clones, RCM modulators, adapters) is allocated per task and
/// never aliases another task's storage.
struct BackboneLayer {
  LayerSpec spec;
  Parameter weight;  // [cout, cin, k, k]
  Parameter bias;    // [cout]
  BatchNorm shared_bn;
  std::map<TaskId, Parameter> task_weight;
  std::map<TaskId, Parameter> task_bias;
  std::map<TaskId, BatchNorm> task_bn;
  std::optional<RcmConv> rcm;
  std::optional<AdapterConv> series;
  std::optional<AdapterConv> parallel;
};

struct TaskEntry {
  TaskSpec spec;
  AdaptationMode mode = AdaptationMode::RCM;
};

/// Composes W_t (rows [cout, bank]) with a bank [bank, cin, k, k] into the
/// equivalent plain conv weight [cout, cin, k, k].
inline Tensor compose_conv_weight(const Tensor& wt, const Tensor& bank) {
  if (wt.ndim() != 2 || bank.ndim() != 4 || wt.dim(1) != bank.dim(0))
    throw Error("compose_conv_weight: shape mismatch");
  int cout = wt.dim(0), nb = bank.dim(0), cin = bank.dim(1), k = bank.dim(2);
  Tensor out({cout, cin, k, k});
  int64_t fsz = static_cast<int64_t>(cin) * k * k;
  for (int o = 0; o < cout; ++o)
    for (int b = 0; b < nb; ++b) {
      float a = wt.at2(o, b);
      if (a == 0.0f) continue;
      for (int64_t i = 0; i < fsz; ++i)
        out.data[o * fsz + i] += a * bank.data[b * fsz + i];
    }
  return out;
}

class Model {
 public:
  Model(BackboneSpec spec, uint64_t seed, bool factored = false, bool nff = true)
      : spec_(std::move(spec)), factored_(factored), nff_(nff), seed_(seed) {
    if (spec_.layers.empty()) throw Error("model: empty backbone spec");
    for (size_t i = 0; i < spec_.layers.size(); ++i) {
      const LayerSpec& ls = spec_.layers[i];
      BackboneLayer layer;
      layer.spec = ls;
      std::string base = "layers." + std::to_string(i);
      Rng rng(Rng::derive(seed, i));
      layer.weight = Parameter(base + ".weight", he_init(ls.out_ch, ls.in_ch, ls.k, rng), true);
      layer.bias = Parameter(base + ".bias", Tensor({ls.out_ch}), true);
      layer.shared_bn = BatchNorm(base + ".bn", ls.out_ch, true);
      if (factored_) {
        // Factored pretraining: the bank trains jointly with a pretrain
        // modulator; freeze_backbone() makes the bank immutable.
        Rng rng2(Rng::derive(seed, 1000 + i));
        Tensor bank = he_init(ls.out_ch, ls.in_ch, ls.k, rng2);
        layer.rcm.emplace(base + ".rcm", bank, ls.stride, ls.pad, ls.out_ch, nff_,
                          /*bank_trainable=*/true);
        Tensor ident({ls.out_ch, ls.out_ch});
        for (int c = 0; c < ls.out_ch; ++c) ident.at2(c, c) = 1.0f;
        add_modulator_unchecked(*layer.rcm, kPretrainTask, ident, Tensor({ls.out_ch}));
      }
      layers_.push_back(std::move(layer));
    }
    // classification head for the pretraining proxy
    TaskSpec pre;
    pre.id = kPretrainTask;
    pre.label = "class";
    pre.head.kind = HeadSpec::Kind::Classifier;
    pre.head.out_channels = spec_.num_classes;
    pre.loss = LossKind::CrossEntropy;
    pre.metric = MetricKind::Accuracy;
    tasks_.emplace(kPretrainTask, TaskEntry{pre, AdaptationMode::SingleTask});
    heads_.emplace(kPretrainTask, make_head(pre));
  }

  const BackboneSpec& spec() const { return spec_; }
  bool factored() const { return factored_; }
  bool nff() const { return nff_; }
  bool frozen() const { return frozen_; }
  uint64_t seed() const { return seed_; }
  std::vector<BackboneLayer>& layers() { return layers_; }
  const std::vector<BackboneLayer>& layers() const { return layers_; }
  const std::map<TaskId, TaskEntry>& tasks() const { return tasks_; }
  std::map<TaskId, Head>& heads() { return heads_; }

  bool has_task(const TaskId& t) const { return tasks_.count(t) > 0; }
  const TaskEntry& task(const TaskId& t) const {
    auto it = tasks_.find(t);
    if (it == tasks_.end()) throw Error("model: unknown task " + t);
    return it->second;
  }

  /// Ends the pretraining phase: shared conv weights (or the factored bank)
  /// become non-trainable. For factored models the equivalent plain weights
  /// are composed so that non-RCM adaptation modes keep working.
  void freeze_backbone() {
    for (auto& layer : layers_) {
      if (layer.rcm && !layer.rcm->frozen()) {
        layer.rcm->freeze();
        const auto& mod = layer.rcm->modulator(kPretrainTask);
        Tensor wt = mod.nff ? layer.rcm->fold_nff(kPretrainTask) : mod.w.value;
        layer.weight.value = compose_conv_weight(wt, layer.rcm->shared().value);
        layer.bias.value = mod.bias.value;
      }
      layer.weight.trainable = false;
      layer.bias.trainable = false;
      layer.shared_bn.gamma.trainable = false;
      layer.shared_bn.beta.trainable = false;
    }
    frozen_ = true;
  }

  /// Allocates all per-task state for `spec.id` under the given mode. Never
  /// touches any other task's parameters or statistics.
  void register_task(const TaskSpec& spec, AdaptationMode mode,
                     ModulatorInit init = ModulatorInit::Identity) {
    if (tasks_.count(spec.id)) throw Error("model: duplicate task id " + spec.id);
    if (!frozen_) throw Error("model: freeze_backbone() before registering tasks");
    const TaskId& t = spec.id;
    for (size_t i = 0; i < layers_.size(); ++i) {
      BackboneLayer& layer = layers_[i];
      std::string base = "layers." + std::to_string(i);
      bool bn_trainable = mode != AdaptationMode::FreezeEncoder &&
                          mode != AdaptationMode::TaskSpecificConv;
      layer.task_bn.emplace(t, layer.shared_bn.clone(base + ".bn." + t, bn_trainable));
      switch (mode) {
        case AdaptationMode::FreezeEncoder:
        case AdaptationMode::TaskSpecificBN:
          break;
        case AdaptationMode::TaskSpecificConv:
        case AdaptationMode::SingleTask:
          layer.task_weight.emplace(
              t, Parameter(base + ".task." + t + ".weight", layer.weight.value, true));
          layer.task_bias.emplace(
              t, Parameter(base + ".task." + t + ".bias", layer.bias.value, true));
          break;
        case AdaptationMode::RCM: {
          ensure_rcm(i);
          ModulatorInit use = init;
          if (use == ModulatorInit::Identity && layer.rcm->default_init()) {
            // response-initialized or factored-pretrained banks carry a
            // stored init; fresh tasks start from it
            use = ModulatorInit::OrthogonalU;
          }
          layer.rcm->add_task(t, use, nullptr, &layer.bias.value);
          break;
        }
        case AdaptationMode::SeriesRA:
        case AdaptationMode::ParallelRA: {
          auto& slot = mode == AdaptationMode::SeriesRA ? layer.series : layer.parallel;
          if (!slot) {
            const char* nm = mode == AdaptationMode::SeriesRA ? ".series" : ".parallel";
            slot.emplace(base + nm,
                         Parameter(base + nm + ".base_weight", layer.weight.value, false),
                         Parameter(base + nm + ".base_bias", layer.bias.value, false),
                         layer.spec.stride, layer.spec.pad,
                         mode == AdaptationMode::SeriesRA ? AdapterTopology::Series
                                                          : AdapterTopology::Parallel);
          }
          slot->add_task(t);
          break;
        }
      }
    }
    heads_.emplace(t, make_head(spec));
    tasks_.emplace(t, TaskEntry{spec, mode});
  }

  /// Task-conditional forward pass. `trace` (optional) receives each block's
  /// post-activation output plus the head output, eval use only.
  NodeP<float> forward(const Tensor& images, const TaskId& t, Mode mode,
                       std::vector<Tensor>* trace = nullptr) {
    const TaskEntry& entry = task(t);
    if (t == kPretrainTask) return forward_pretrain(images, mode, trace);
    auto x = constant(images);
    for (auto& layer : layers_) {
      NodeP<float> z = layer_forward_pre_bn(layer, x, t, entry.mode);
      z = batchnorm(z, layer.task_bn.at(t), mode, bn_momentum_);
      if (layer.spec.relu) z = relu(z);
      if (trace) trace->push_back(z->value);
      x = z;
    }
    auto out = head_forward(heads_.at(t), x);
    if (trace) trace->push_back(out->value);
    return out;
  }

  /// Forward through the shared (pretraining) path: the factored/decomposed
  /// layers run through the RCM form when present, otherwise the plain convs.
  NodeP<float> forward_pretrain(const Tensor& images, Mode mode,
                                std::vector<Tensor>* trace = nullptr) {
    auto x = constant(images);
    for (auto& layer : layers_) {
      NodeP<float> z;
      if (layer.rcm && layer.rcm->has_task(kPretrainTask))
        z = layer.rcm->forward_pre_bn(x, kPretrainTask);
      else
        z = conv2d(x, leaf(layer.weight), leaf(layer.bias), layer.spec.stride, layer.spec.pad);
      z = batchnorm(z, layer.shared_bn, mode, bn_momentum_);
      if (layer.spec.relu) z = relu(z);
      if (trace) trace->push_back(z->value);
      x = z;
    }
    auto out = head_forward(heads_.at(kPretrainTask), x);
    if (trace) trace->push_back(out->value);
    return out;
  }

  /// Pre-BN response of layer `idx` on the *plain* shared path (the response
  /// collection point for response initialization).
  Tensor plain_pre_bn_response(const Tensor& images, size_t idx) {
    if (idx >= layers_.size()) throw Error("model: layer index out of range");
    auto x = constant(images);
    for (size_t i = 0; i <= idx; ++i) {
      BackboneLayer& layer = layers_[i];
      auto z = conv2d(x, leaf(layer.weight), leaf(layer.bias), layer.spec.stride,
                      layer.spec.pad);
      if (i == idx) return z->value;
      z = batchnorm(z, layer.shared_bn, Mode::Eval, bn_momentum_);
      if (layer.spec.relu) z = relu(z);
      x = z;
    }
    throw Error("unreachable");
  }

  void ensure_rcm(size_t idx) {
    BackboneLayer& layer = layers_[idx];
    if (layer.rcm) return;
    // Plain bank: W_s is the pretrained weight itself, modulators start at
    // identity. Response initialization replaces this with the U^T W^m bank.
    layer.rcm.emplace("layers." + std::to_string(idx) + ".rcm", layer.weight.value,
                      layer.spec.stride, layer.spec.pad, layer.spec.out_ch, nff_,
                      /*bank_trainable=*/false);
  }

  /// All parameters, in deterministic (name-sorted) order.
  std::map<std::string, Parameter*> parameter_index() {
    std::map<std::string, Parameter*> out;
    auto put = [&out](Parameter& p) { out.emplace(p.name, &p); };
    for (auto& layer : layers_) {
      put(layer.weight);
      put(layer.bias);
      put(layer.shared_bn.gamma);
      put(layer.shared_bn.beta);
      for (auto& [t, p] : layer.task_weight) put(p);
      for (auto& [t, p] : layer.task_bias) put(p);
      for (auto& [t, bn] : layer.task_bn) {
        put(bn.gamma);
        put(bn.beta);
      }
      if (layer.rcm) {
        put(layer.rcm->shared_mutable());
        for (auto& [t, m] : const_cast<std::map<TaskId, RcmConv::Modulator>&>(
                 layer.rcm->modulators())) {
          if (m.nff) {
            put(m.v);
            put(m.g);
          } else {
            put(m.w);
          }
          put(m.bias);
        }
      }
      for (auto* ad : {layer.series ? &*layer.series : nullptr,
                       layer.parallel ? &*layer.parallel : nullptr}) {
        if (!ad) continue;
        put(ad->base_weight_mutable());
        put(ad->base_bias_mutable());
        for (auto& [t, p] : ad->adapters()) put(p);
        for (auto& [t, p] : ad->adapter_biases()) put(p);
      }
    }
    for (auto& [t, h] : heads_) {
      put(h.w);
      put(h.b);
    }
    return out;
  }

  /// Parameters plus batch-norm running statistics, for persistence and
  /// state hashing. Momentum buffers are deliberately excluded.
  std::map<std::string, Tensor*> named_state() {
    std::map<std::string, Tensor*> out;
    for (auto& [name, p] : parameter_index()) out.emplace(name, &p->value);
    for (size_t i = 0; i < layers_.size(); ++i) {
      auto& layer = layers_[i];
      std::string base = "layers." + std::to_string(i);
      out.emplace(base + ".bn.running_mean", &layer.shared_bn.running_mean);
      out.emplace(base + ".bn.running_var", &layer.shared_bn.running_var);
      for (auto& [t, bn] : layer.task_bn) {
        out.emplace(base + ".bn." + t + ".running_mean", &bn.running_mean);
        out.emplace(base + ".bn." + t + ".running_var", &bn.running_var);
      }
    }
    return out;
  }

  void zero_grads() {
    for (auto& [name, p] : parameter_index()) p->zero_grad();
  }

  float bn_momentum() const { return bn_momentum_; }
  void set_bn_momentum(float m) { bn_momentum_ = m; }

 private:
  static Tensor he_init(int cout, int cin, int k, Rng& rng) {
    Tensor w({cout, cin, k, k});
    double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    for (float& v : w.data) v = static_cast<float>(rng.next_normal(0.0, std));
    return w;
  }

  Head make_head(const TaskSpec& ts) {
    Head h;
    h.spec = ts.head;
    int feat = spec_.out_channels();
    Rng rng(Rng::derive(seed_, std::hash<std::string>{}(ts.id) | 1));
    if (ts.head.kind == HeadSpec::Kind::Dense) {
      Tensor w({ts.head.out_channels, feat, 1, 1});
      double std = std::sqrt(2.0 / feat);
      for (float& v : w.data) v = static_cast<float>(rng.next_normal(0.0, std));
      h.w = Parameter("heads." + ts.id + ".weight", w, true);
      h.b = Parameter("heads." + ts.id + ".bias", Tensor({ts.head.out_channels}), true);
      h.upsample = spec_.total_stride();
    } else {
      Tensor w({ts.head.out_channels, feat});
      double std = std::sqrt(1.0 / feat);
      for (float& v : w.data) v = static_cast<float>(rng.next_normal(0.0, std));
      h.w = Parameter("heads." + ts.id + ".weight", w, true);
      h.b = Parameter("heads." + ts.id + ".bias", Tensor({ts.head.out_channels}), true);
    }
    return h;
  }

  NodeP<float> head_forward(Head& h, const NodeP<float>& feat) {
    if (h.spec.kind == HeadSpec::Kind::Dense) {
      auto z = conv2d(feat, leaf(h.w), leaf(h.b), 1, 0);
      return nearest_upsample(z, h.upsample);
    }
    return linear(global_avg_pool(feat), leaf(h.w), leaf(h.b));
  }

  NodeP<float> layer_forward_pre_bn(BackboneLayer& layer, const NodeP<float>& x,
                                    const TaskId& t, AdaptationMode mode) {
    switch (mode) {
      case AdaptationMode::FreezeEncoder:
      case AdaptationMode::TaskSpecificBN:
        return conv2d(x, leaf(layer.weight), leaf(layer.bias), layer.spec.stride,
                      layer.spec.pad);
      case AdaptationMode::TaskSpecificConv:
      case AdaptationMode::SingleTask:
        return conv2d(x, leaf(layer.task_weight.at(t)), leaf(layer.task_bias.at(t)),
                      layer.spec.stride, layer.spec.pad);
      case AdaptationMode::RCM:
        return layer.rcm->forward_pre_bn(x, t);
      case AdaptationMode::SeriesRA:
        return layer.series->forward_pre_bn(x, t);
      case AdaptationMode::ParallelRA:
        return layer.parallel->forward_pre_bn(x, t);
    }
    throw Error("bad mode");
  }

  static void add_modulator_unchecked(RcmConv& rcm, const TaskId& t, const Tensor& rows,
                                      const Tensor& bias) {
    // Pretrain-phase modulator on a not-yet-frozen bank: freeze, add, unfreeze.
    bool was = rcm.frozen();
    if (!was) rcm.freeze();
    rcm.add_task(t, ModulatorInit::Given, &rows, &bias);
    if (!was) rcm.shared_mutable().trainable = true;
  }

  BackboneSpec spec_;
  bool factored_ = false;
  bool nff_ = true;
  bool frozen_ = false;
  uint64_t seed_ = 0;
  float bn_momentum_ = 0.1f;
  std::vector<BackboneLayer> layers_;
  std::map<TaskId, TaskEntry> tasks_;
  std::map<TaskId, Head> heads_;
};

}  // namespace rcm
