#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rcm/reparam.hpp"
#include "rcm/tasks.hpp"

namespace rcm {

/// Minibatch gradients of one layer's shared weights for one task,
/// flattened to rows of an [m, d] matrix.
struct GradientSampleSet {
  TaskId task;
  std::string layer;
  Tensor samples;  // [m, d]
};

/// Pairwise task correlations of gradient dissimilarity structure.
struct RSAMatrix {
  std::vector<TaskId> tasks;
  TensorD values;  // [P, P], symmetric, unit diagonal
};

struct DropReport {
  struct PerTask {
    TaskId task;
    double model_metric;     // M_{m,i}
    double baseline_metric;  // M_{b,i}
    bool lower_better;       // l_i
    double drop_percent;
  };
  std::vector<PerTask> per_task;
  double delta_m_percent = 0.0;
};

/// CRC32 over all named model state (parameters + BN running stats); used to
/// assert that analysis passes never mutate the model.
inline uint32_t model_state_hash(Model& model) {
  uint32_t crc = 0;
  for (auto& [name, t] : model.named_state()) {
    crc = static_cast<uint32_t>(crc32(crc, reinterpret_cast<const Bytef*>(name.data()),
                                      static_cast<uInt>(name.size())));
    crc = static_cast<uint32_t>(
        crc32(crc, reinterpret_cast<const Bytef*>(t->data.data()),
              static_cast<uInt>(t->data.size() * sizeof(float))));
  }
  return crc;
}

/// The layer's shared weights: the RCM filter bank when the layer is
/// decomposed, the plain conv weight otherwise.
inline Parameter& shared_layer_weights(Model& model, const std::string& layer_name) {
  int idx = layer_index_from_name(model, layer_name);
  BackboneLayer& layer = model.layers()[static_cast<size_t>(idx)];
  if (layer.rcm) return layer.rcm->shared_mutable();
  return layer.weight;
}

/// Computes (without applying) d loss_task / d shared-weights for each of
/// `m` minibatches. Forward passes run in eval mode so no running statistic
/// moves; the model state is bit-identical before and after.
inline GradientSampleSet capture_task_gradients(Model& model, const TaskId& task,
                                                const std::string& layer_name,
                                                const Dataset& ds, int m, int batch_size = 16) {
  const TaskEntry& entry = model.task(task);
  Parameter& shared = shared_layer_weights(model, layer_name);
  const int64_t d = shared.value.numel();
  const int n = static_cast<int>(ds.samples.size());
  if (m < 2) throw Error("capture_task_gradients: need m >= 2");

  GradientSampleSet out;
  out.task = task;
  out.layer = layer_name;
  out.samples = Tensor({m, static_cast<int>(d)});

  for (int mb = 0; mb < m; ++mb) {
    std::vector<int> idx;
    for (int i = 0; i < batch_size; ++i) idx.push_back((mb * batch_size + i) % n);
    Batch batch = make_batch(ds, idx, entry.spec);
    auto pred = model.forward(batch.images, task, Mode::Eval);
    auto loss = task_loss(pred, batch.labels, entry.spec);
    backward(loss);
    if (!shared.grad)
      throw Error("capture_task_gradients: layer has no shared weights in this task's path");
    check_finite(*shared.grad, "captured gradient");
    std::copy(shared.grad->data.begin(), shared.grad->data.end(),
              out.samples.data.begin() + static_cast<size_t>(mb) * d);
    model.zero_grads();
  }
  return out;
}

// ---------------------------------------------------------------------------
// RSA
// ---------------------------------------------------------------------------

namespace detail {

inline double pearson(const float* a, const float* b, int64_t n) {
  double ma = 0, mb = 0;
  for (int64_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, sa = 0, sb = 0;
  for (int64_t i = 0; i < n; ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    sa += da * da;
    sb += db * db;
  }
  if (sa == 0 || sb == 0) throw Error("rsa: zero-variance gradient sample");
  return sab / std::sqrt(sa * sb);
}

inline std::vector<double> ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&v](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> r(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;  // average rank for ties
    for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= ra.size();
  mb /= rb.size();
  double sab = 0, sa = 0, sb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    double da = ra[i] - ma, db = rb[i] - mb;
    sab += da * db;
    sa += da * da;
    sb += db * db;
  }
  if (sa == 0 || sb == 0) throw Error("rsa: degenerate (constant) RDM");
  return sab / std::sqrt(sa * sb);
}

}  // namespace detail

/// Upper triangle of the representational dissimilarity matrix
/// RDM[a,b] = 1 - Pearson(sample_a, sample_b) over a task's m gradients.
inline std::vector<double> rdm_upper(const GradientSampleSet& set) {
  const int m = set.samples.dim(0);
  const int64_t d = set.samples.dim(1);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(m) * (m - 1) / 2);
  for (int a = 0; a < m; ++a)
    for (int b = a + 1; b < m; ++b)
      out.push_back(1.0 - detail::pearson(set.samples.data.data() + static_cast<size_t>(a) * d,
                                          set.samples.data.data() + static_cast<size_t>(b) * d,
                                          d));
  return out;
}

/// Entry (i,j): Spearman rank correlation between the RDM upper triangles of
/// task i and task j. Diagonal forced to 1.
inline RSAMatrix rsa_correlation(const std::vector<GradientSampleSet>& sets) {
  if (sets.size() < 1) throw Error("rsa: no gradient sets");
  const int p = static_cast<int>(sets.size());
  for (const auto& s : sets)
    if (!s.samples.same_shape(sets[0].samples))
      throw Error("rsa: mismatched sample dimensions across tasks");

  std::vector<std::vector<double>> rdms;
  rdms.reserve(sets.size());
  for (const auto& s : sets) rdms.push_back(rdm_upper(s));

  RSAMatrix out;
  for (const auto& s : sets) out.tasks.push_back(s.task);
  out.values = TensorD({p, p});
  for (int i = 0; i < p; ++i) {
    out.values.at2(i, i) = 1.0;
    for (int j = i + 1; j < p; ++j) {
      double r = detail::spearman(rdms[static_cast<size_t>(i)], rdms[static_cast<size_t>(j)]);
      out.values.at2(i, j) = r;
      out.values.at2(j, i) = r;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Average per-task performance drop
// ---------------------------------------------------------------------------

/// Per-task relative drop versus the single-task baseline, positive when the
/// model is worse, sign controlled by the lower-better flag. delta_m is the
/// mean drop in percent.
inline DropReport delta_m(const std::map<TaskId, double>& model_metrics,
                          const std::map<TaskId, double>& baseline_metrics,
                          const std::map<TaskId, bool>& lower_better) {
  if (model_metrics.empty()) throw Error("delta_m: no tasks");
  if (model_metrics.size() != baseline_metrics.size() ||
      model_metrics.size() != lower_better.size())
    throw Error("delta_m: task key mismatch");
  DropReport rep;
  double sum = 0;
  for (const auto& [t, mm] : model_metrics) {
    auto bit = baseline_metrics.find(t);
    auto lit = lower_better.find(t);
    if (bit == baseline_metrics.end() || lit == lower_better.end())
      throw Error("delta_m: task key mismatch on " + t);
    double mb = bit->second;
    if (mb == 0.0) throw Error("delta_m: zero baseline for " + t);
    double drop = (lit->second ? 1.0 : -1.0) * (mm - mb) / mb * 100.0;
    rep.per_task.push_back({t, mm, mb, lit->second, drop});
    sum += drop;
  }
  rep.delta_m_percent = sum / static_cast<double>(rep.per_task.size());
  return rep;
}

}  // namespace rcm
