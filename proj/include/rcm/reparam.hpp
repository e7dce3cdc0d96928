#pragma once

#include <string>
#include <vector>

#include "rcm/linalg.hpp"
#include "rcm/model.hpp"

namespace rcm {

/// Inputs used to sample layer responses. Location sampling is a pure
/// function of (seed, layer), so a probe yields bit-identical response
/// matrices across runs.
struct ProbeSet {
  std::vector<Tensor> samples;  // each [3,H,W]
  int locations_per_sample = 16;
  uint64_t seed = 0;

  int total_locations() const {
    return static_cast<int>(samples.size()) * locations_per_sample;
  }
};

struct EquivalenceReport {
  std::vector<double> per_layer_max_dev;
  double global_max_dev = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

inline int layer_index_from_name(const Model& model, const std::string& layer_name) {
  for (size_t i = 0; i < model.layers().size(); ++i)
    if ("layers." + std::to_string(i) == layer_name) return static_cast<int>(i);
  throw Error("unknown layer: " + layer_name);
}

/// Gathers n = |probe| * locations_per_sample pre-BN response vectors of the
/// named conv layer on the plain shared path, mean-centered.
inline ResponseMatrix collect_responses(Model& model, const std::string& layer_name,
                                        const ProbeSet& probe) {
  int idx = layer_index_from_name(model, layer_name);
  int c_out = model.layers()[static_cast<size_t>(idx)].spec.out_ch;
  int n = probe.total_locations();
  if (n < c_out)
    throw Error("collect_responses: need at least c_out=" + std::to_string(c_out) +
                " samples, got " + std::to_string(n));
  Tensor samples({c_out, n});
  Rng rng(Rng::derive(probe.seed, static_cast<uint64_t>(idx)));
  int col = 0;
  for (const Tensor& img : probe.samples) {
    Tensor batch({1, img.dim(0), img.dim(1), img.dim(2)});
    batch.data = img.data;
    Tensor resp = model.plain_pre_bn_response(batch, static_cast<size_t>(idx));
    int h = resp.dim(2), w = resp.dim(3);
    for (int l = 0; l < probe.locations_per_sample; ++l, ++col) {
      int y = rng.next_int(h);
      int x = rng.next_int(w);
      for (int c = 0; c < c_out; ++c) samples.at2(c, col) = resp.at4(0, c, y, x);
    }
  }
  return center_responses(samples);
}

/// Response initialization of one layer: eigendecompose the response
/// covariance, set the bank to U_r^T W^m, store U_r as the default modulator
/// init, move the pretrain path onto the RCM form, and fold the residual
/// bias b = ybar - U U^T ybar into every downstream batch norm's running
/// mean. `rank` <= 0 keeps full rank, where b vanishes and the decomposition
/// is exact.
inline void response_initialize_layer(Model& model, size_t idx, const ProbeSet& probe,
                                      int rank = 0) {
  BackboneLayer& layer = model.layers()[idx];
  // An rcm slot without a stored init is just the plain-bank form created by
  // task registration; it is replaced (and its tasks re-seated) below.
  if (layer.rcm && (layer.rcm->default_init() || layer.rcm->has_task(kPretrainTask)))
    throw Error("response_initialize: layer already decomposed");
  const LayerSpec& ls = layer.spec;
  const int c_out = ls.out_ch;
  const int r = rank <= 0 ? c_out : rank;
  if (r < 1 || r > c_out) throw Error("response_initialize: bad rank");

  ResponseMatrix rm = collect_responses(model, "layers." + std::to_string(idx), probe);
  EigenPair eig = sym_eig(covariance(rm));

  // U_r: [c_out, r], top-r eigenvector columns
  Tensor u({c_out, r});
  for (int i = 0; i < c_out; ++i)
    for (int j = 0; j < r; ++j) u.at2(i, j) = static_cast<float>(eig.U.at2(i, j));

  // bank = U_r^T W^m, shaped [r, cin, k, k]
  const int64_t fsz = static_cast<int64_t>(ls.in_ch) * ls.k * ls.k;
  Tensor bank({r, ls.in_ch, ls.k, ls.k});
  for (int b = 0; b < r; ++b)
    for (int64_t f = 0; f < fsz; ++f) {
      double s = 0;
      for (int o = 0; o < c_out; ++o)
        s += static_cast<double>(u.at2(o, b)) * layer.weight.value.data[o * fsz + f];
      bank.data[b * fsz + f] = static_cast<float>(s);
    }

  // b = ybar - U_r U_r^T ybar; the block computes BN(W_t W_s x + bias), so
  // shifting the running mean by -b reproduces BN(W^m x + bias).
  std::vector<float> bias_fold(static_cast<size_t>(c_out));
  for (int i = 0; i < c_out; ++i) {
    double proj = 0;
    for (int j = 0; j < r; ++j) {
      double uy = 0;
      for (int o = 0; o < c_out; ++o) uy += static_cast<double>(u.at2(o, j)) * rm.mean[o];
      proj += static_cast<double>(u.at2(i, j)) * uy;
    }
    bias_fold[static_cast<size_t>(i)] = static_cast<float>(rm.mean[i] - proj);
  }

  layer.rcm.reset();
  layer.rcm.emplace("layers." + std::to_string(idx) + ".rcm", bank, ls.stride, ls.pad,
                    c_out, model.nff(), /*bank_trainable=*/false);
  layer.rcm->set_default_init(u);
  layer.rcm->add_task(kPretrainTask, ModulatorInit::Given, &u, &layer.bias.value);

  for (int c = 0; c < c_out; ++c) layer.shared_bn.running_mean[c] -= bias_fold[static_cast<size_t>(c)];
  for (auto& [t, bn] : layer.task_bn)
    for (int c = 0; c < c_out; ++c) bn.running_mean[c] -= bias_fold[static_cast<size_t>(c)];

  // Existing RCM tasks are re-seated on the new bank.
  for (auto& [t, entry] : model.tasks()) {
    if (t == kPretrainTask || entry.mode != AdaptationMode::RCM) continue;
    layer.rcm->remove_task(t);
    layer.rcm->add_task(t, ModulatorInit::Given, &u, &layer.bias.value);
  }
}

/// Whole-model response initialization. All responses are taken from the
/// original (plain) forward pass; at full rank the decomposition is exact,
/// so the layer order is immaterial.
inline void response_initialize(Model& model, const ProbeSet& probe, int rank = 0) {
  if (model.factored())
    throw Error("response_initialize: model was pretrained in factored form");
  for (size_t i = 0; i < model.layers().size(); ++i)
    response_initialize_layer(model, i, probe, rank);
}

/// Deployment fold of a task's NFF modulator at one layer.
inline Tensor fold_nff(RcmConv& layer, const TaskId& task) { return layer.fold_nff(task); }

/// Runs both models in eval mode over `inputs` and reports the per-layer and
/// global max abs deviation of all block outputs plus the head output.
inline EquivalenceReport verify_equivalence(Model& a, Model& b, const TaskId& task,
                                            const std::vector<Tensor>& inputs, double tol) {
  EquivalenceReport rep;
  rep.tolerance = tol;
  for (const Tensor& batch : inputs) {
    std::vector<Tensor> ta, tb;
    a.forward(batch, task, Mode::Eval, &ta);
    b.forward(batch, task, Mode::Eval, &tb);
    if (ta.size() != tb.size()) throw Error("verify_equivalence: trace length mismatch");
    if (rep.per_layer_max_dev.empty()) rep.per_layer_max_dev.assign(ta.size(), 0.0);
    for (size_t i = 0; i < ta.size(); ++i) {
      if (!ta[i].same_shape(tb[i])) throw Error("verify_equivalence: layer shape mismatch");
      double d = max_abs_diff(ta[i], tb[i]);
      rep.per_layer_max_dev[i] = std::max(rep.per_layer_max_dev[i], d);
    }
  }
  for (double d : rep.per_layer_max_dev) rep.global_max_dev = std::max(rep.global_max_dev, d);
  rep.pass = rep.global_max_dev < tol;
  return rep;
}

}  // namespace rcm
