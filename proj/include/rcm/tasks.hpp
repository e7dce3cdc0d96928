#pragma once

#include <set>
#include <string>
#include <vector>

#include "rcm/data.hpp"
#include "rcm/metrics.hpp"
#include "rcm/model.hpp"

namespace rcm {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double base_lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  uint64_t seed = 1;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || base_lr <= 0 || momentum < 0 || weight_decay < 0 ||
        poly_power <= 0)
      throw Error("train config: all fields must be positive");
  }
};

struct EpochStat {
  int epoch;
  double loss;
  double metric;
};

// ---------------------------------------------------------------------------
// Benchmark task dictionary. Loss weights follow the conventional dense
// multi-task recipe: BCE x50 with 0.95/0.05 class weights for edges, CE x1
// for semseg, CE x2 for parts, L1 x10 for normals, L1 x1 for depth, BCE x5
// for saliency.
// ---------------------------------------------------------------------------

inline TaskSpec benchmark_task(const std::string& name) {
  TaskSpec t;
  t.id = name;
  t.label = name;
  if (name == "edge") {
    t.head = {HeadSpec::Kind::Dense, 1};
    t.loss = LossKind::WeightedBce;
    t.loss_weight = 50.0f;
    t.bce_pos_weight = 0.95f;
    t.bce_neg_weight = 0.05f;
    t.metric = MetricKind::F1Edge;
    t.lower_better = false;
  } else if (name == "semseg") {
    t.head = {HeadSpec::Kind::Dense, kSemsegClasses};
    t.loss = LossKind::CrossEntropy;
    t.loss_weight = 1.0f;
    t.metric = MetricKind::MIoU;
    t.lower_better = false;
  } else if (name == "parts") {
    t.head = {HeadSpec::Kind::Dense, kPartsClasses};
    t.loss = LossKind::CrossEntropy;
    t.loss_weight = 2.0f;
    t.metric = MetricKind::MIoU;
    t.lower_better = false;
  } else if (name == "normals") {
    t.label = "normals2d";
    t.head = {HeadSpec::Kind::Dense, 2};
    t.loss = LossKind::L1;
    t.loss_weight = 10.0f;
    t.metric = MetricKind::MeanErr;
    t.lower_better = true;
  } else if (name == "saliency" || name == "sal") {
    t.label = "saliency";
    t.head = {HeadSpec::Kind::Dense, 1};
    t.loss = LossKind::WeightedBce;
    t.loss_weight = 5.0f;
    t.bce_pos_weight = 1.0f;
    t.bce_neg_weight = 1.0f;
    t.metric = MetricKind::MIoU;
    t.lower_better = false;
  } else if (name == "depth") {
    t.head = {HeadSpec::Kind::Dense, 1};
    t.loss = LossKind::L1;
    t.loss_weight = 1.0f;
    t.metric = MetricKind::Rmse;
    t.lower_better = true;
  } else {
    throw Error("unknown benchmark task: " + name);
  }
  return t;
}

inline const std::vector<std::string>& benchmark_tasks() {
  static const std::vector<std::string> names = {"edge", "semseg", "parts", "normals",
                                                 "saliency"};
  return names;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

inline const Tensor& sample_label(const MultiTaskSample& s, const std::string& field) {
  if (field == "image") return s.image;
  if (field == "semseg") return s.semseg;
  if (field == "parts") return s.parts;
  if (field == "edge") return s.edge;
  if (field == "normals2d") return s.normals2d;
  if (field == "saliency") return s.saliency;
  if (field == "depth") return s.depth;
  if (field == "class") return s.class_label;
  throw Error("unknown label field: " + field);
}

struct Batch {
  Tensor images;  // [B,3,H,W]
  Tensor labels;  // layout depends on the task
};

/// Stacks images and the task's label field. Class maps come out as
/// [B,H,W], single-channel dense targets as [B,1,H,W], multi-channel dense
/// targets as [B,C,H,W], classifier labels as [B].
inline Batch make_batch(const Dataset& ds, const std::vector<int>& idx, const TaskSpec& task) {
  if (idx.empty()) throw Error("make_batch: empty batch");
  const int b = static_cast<int>(idx.size());
  const MultiTaskSample& first = ds.samples.at(static_cast<size_t>(idx[0]));
  const int h = first.image.dim(1), w = first.image.dim(2);
  Batch out;
  out.images = Tensor({b, 3, h, w});
  const Tensor& l0 = sample_label(first, task.label);
  if (l0.numel() == 0) throw Error("missing labels for task " + task.id);

  std::vector<int> lshape;
  if (task.head.kind == HeadSpec::Kind::Classifier)
    lshape = {b};
  else if (task.loss == LossKind::CrossEntropy)
    lshape = {b, h, w};
  else if (l0.ndim() == 2)
    lshape = {b, 1, h, w};
  else
    lshape = {b, l0.dim(0), h, w};
  out.labels = Tensor(lshape);

  int64_t img_sz = first.image.numel();
  for (int i = 0; i < b; ++i) {
    const MultiTaskSample& s = ds.samples.at(static_cast<size_t>(idx[static_cast<size_t>(i)]));
    std::copy(s.image.data.begin(), s.image.data.end(),
              out.images.data.begin() + static_cast<size_t>(i) * img_sz);
    const Tensor& l = sample_label(s, task.label);
    int64_t lsz = l.numel();
    std::copy(l.data.begin(), l.data.end(),
              out.labels.data.begin() + static_cast<size_t>(i) * lsz);
  }
  return out;
}

inline NodeP<float> task_loss(const NodeP<float>& pred, const Tensor& labels,
                              const TaskSpec& task) {
  switch (task.loss) {
    case LossKind::WeightedBce:
      return weighted_bce_loss(pred, labels, task.bce_pos_weight, task.bce_neg_weight,
                               task.loss_weight);
    case LossKind::CrossEntropy:
      if (task.head.kind == HeadSpec::Kind::Classifier)
        return cross_entropy_logits2d(pred, labels, task.loss_weight);
      return cross_entropy_loss(pred, labels, task.loss_weight);
    case LossKind::L1:
      return l1_loss(pred, labels, task.loss_weight);
  }
  throw Error("bad loss kind");
}

// ---------------------------------------------------------------------------
// Trainable-set resolution per adaptation mode
// ---------------------------------------------------------------------------

/// Mode table. The shared filter bank is never in any task's set; the
/// pretrain pseudo-task resolves to the shared backbone path.
inline std::set<std::string> trainable_parameters(Model& model, const TaskId& t,
                                                  AdaptationMode mode) {
  if (!model.has_task(t)) throw Error("trainable_parameters: unknown task " + t);
  std::set<std::string> out;
  const size_t n_layers = model.layers().size();
  auto layer_base = [](size_t i) { return "layers." + std::to_string(i); };

  out.insert("heads." + t + ".weight");
  out.insert("heads." + t + ".bias");

  if (t == kPretrainTask) {
    for (size_t i = 0; i < n_layers; ++i) {
      std::string base = layer_base(i);
      const BackboneLayer& layer = model.layers()[i];
      if (model.factored() && layer.rcm) {
        out.insert(base + ".rcm.shared");
        std::string mb = base + ".rcm.task." + std::string(kPretrainTask);
        if (model.nff()) {
          out.insert(mb + ".v");
          out.insert(mb + ".g");
        } else {
          out.insert(mb + ".w");
        }
        out.insert(mb + ".bias");
      } else {
        out.insert(base + ".weight");
        out.insert(base + ".bias");
      }
      out.insert(base + ".bn.gamma");
      out.insert(base + ".bn.beta");
    }
    return out;
  }

  for (size_t i = 0; i < n_layers; ++i) {
    std::string base = layer_base(i);
    switch (mode) {
      case AdaptationMode::FreezeEncoder:
        break;
      case AdaptationMode::TaskSpecificBN:
        out.insert(base + ".bn." + t + ".gamma");
        out.insert(base + ".bn." + t + ".beta");
        break;
      case AdaptationMode::TaskSpecificConv:
        out.insert(base + ".task." + t + ".weight");
        out.insert(base + ".task." + t + ".bias");
        break;
      case AdaptationMode::SingleTask:
        out.insert(base + ".task." + t + ".weight");
        out.insert(base + ".task." + t + ".bias");
        out.insert(base + ".bn." + t + ".gamma");
        out.insert(base + ".bn." + t + ".beta");
        break;
      case AdaptationMode::RCM: {
        std::string mb = base + ".rcm.task." + t;
        if (model.nff()) {
          out.insert(mb + ".v");
          out.insert(mb + ".g");
        } else {
          out.insert(mb + ".w");
        }
        out.insert(mb + ".bias");
        out.insert(base + ".bn." + t + ".gamma");
        out.insert(base + ".bn." + t + ".beta");
        break;
      }
      case AdaptationMode::SeriesRA:
      case AdaptationMode::ParallelRA: {
        const char* topo = mode == AdaptationMode::SeriesRA ? ".series" : ".parallel";
        out.insert(base + topo + ".task." + t + ".adapter");
        out.insert(base + topo + ".task." + t + ".adapter_bias");
        out.insert(base + ".bn." + t + ".gamma");
        out.insert(base + ".bn." + t + ".beta");
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

inline double evaluate_task(Model& model, const TaskId& t, const Dataset& ds,
                            int batch_size = 8) {
  const TaskEntry& entry = model.task(t);
  int classes = entry.spec.metric == MetricKind::MIoU
                    ? std::max(entry.spec.head.out_channels, 2)
                    : 0;
  MetricAccumulator acc(entry.spec.metric, classes);
  const int n = static_cast<int>(ds.samples.size());
  for (int start = 0; start < n; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    Batch b = make_batch(ds, idx, entry.spec);
    auto pred = model.forward(b.images, t, Mode::Eval);
    acc.add(pred->value, b.labels);
  }
  return acc.value();
}

/// SGD + momentum + weight decay + poly schedule over exactly the mode's
/// trainable set. History is deterministic given the config seed.
inline std::vector<EpochStat> train_task(Model& model, const TaskId& t, const Dataset& ds,
                                         const TrainConfig& cfg) {
  cfg.validate();
  const TaskEntry& entry = model.task(t);
  std::set<std::string> names = trainable_parameters(model, t, entry.mode);
  auto index = model.parameter_index();
  std::vector<Parameter*> params;
  for (const std::string& name : names) {
    auto it = index.find(name);
    if (it == index.end()) throw Error("train: missing parameter " + name);
    params.push_back(it->second);
  }

  const int n = static_cast<int>(ds.samples.size());
  if (n == 0) throw Error("train: empty dataset");
  const int iters_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int max_iter = cfg.epochs * iters_per_epoch;

  Sgd sgd(static_cast<float>(cfg.momentum), static_cast<float>(cfg.weight_decay));
  std::vector<EpochStat> history;
  int iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::derive(cfg.seed, static_cast<uint64_t>(epoch)));
    rng.shuffle(order);

    double loss_sum = 0;
    for (int start = 0; start < n; start += cfg.batch_size, ++iter) {
      std::vector<int> idx(order.begin() + start,
                           order.begin() + std::min(n, start + cfg.batch_size));
      Batch batch = make_batch(ds, idx, entry.spec);
      auto pred = model.forward(batch.images, t, Mode::Train);
      auto loss = task_loss(pred, batch.labels, entry.spec);
      loss_sum += loss->value[0];
      backward(loss);
      double lr = poly_lr(cfg.base_lr, iter, max_iter, cfg.poly_power);
      sgd.step(params, static_cast<float>(lr));
      model.zero_grads();
    }
    history.push_back({epoch, loss_sum / iters_per_epoch, evaluate_task(model, t, ds)});
  }
  return history;
}

// ---------------------------------------------------------------------------
// Parameter accounting (backbone only; heads are per task in every mode)
// ---------------------------------------------------------------------------

struct ParamCount {
  int64_t shared_weights = 0;
  int64_t shared_bias = 0;
  int64_t shared_bn = 0;
  int64_t per_task_weights = 0;
  int64_t per_task_bias = 0;
  int64_t per_task_bn = 0;

  int64_t shared() const { return shared_weights + shared_bias + shared_bn; }
  int64_t per_task() const { return per_task_weights + per_task_bias + per_task_bn; }
  int64_t total(int tasks) const { return shared() + static_cast<int64_t>(tasks) * per_task(); }
  int64_t weights_total(int tasks) const {
    return shared_weights + static_cast<int64_t>(tasks) * per_task_weights;
  }
};

/// Closed-form counts per adaptation mode. RCM counts the deployed (folded)
/// modulator, c_out^2 weights per layer per task; NFF's extra g vector folds
/// into the modulator at deployment.
inline ParamCount parameter_count(const BackboneSpec& spec, int tasks, AdaptationMode mode) {
  if (tasks < 1) throw Error("parameter_count: need at least one task");
  ParamCount pc;
  for (const LayerSpec& l : spec.layers) {
    const int64_t kw = static_cast<int64_t>(l.k) * l.k * l.in_ch * l.out_ch;
    const int64_t c = l.out_ch;
    switch (mode) {
      case AdaptationMode::FreezeEncoder:
        pc.shared_weights += kw;
        pc.shared_bias += c;
        pc.shared_bn += 2 * c;
        break;
      case AdaptationMode::TaskSpecificBN:
        pc.shared_weights += kw;
        pc.shared_bias += c;
        pc.per_task_bn += 2 * c;
        break;
      case AdaptationMode::TaskSpecificConv:
        pc.per_task_weights += kw;
        pc.per_task_bias += c;
        pc.shared_bn += 2 * c;
        break;
      case AdaptationMode::SingleTask:
        pc.per_task_weights += kw;
        pc.per_task_bias += c;
        pc.per_task_bn += 2 * c;
        break;
      case AdaptationMode::RCM:
        pc.shared_weights += kw;
        pc.per_task_weights += c * c;
        pc.per_task_bias += c;
        pc.per_task_bn += 2 * c;
        break;
      case AdaptationMode::SeriesRA:
      case AdaptationMode::ParallelRA:
        pc.shared_weights += kw;
        pc.shared_bias += c;
        pc.per_task_weights += c * c;
        pc.per_task_bias += c;
        pc.per_task_bn += 2 * c;
        break;
    }
  }
  return pc;
}

}  // namespace rcm
