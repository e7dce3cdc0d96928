#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rcm/nn.hpp"

namespace rcm {

using TaskId = std::string;

/// g * v / ||v|| for a single modulator row.
inline Tensor nff_effective_weight(const Tensor& v, float g) {
  if (v.ndim() != 1) throw Error("nff_effective_weight: 1-D row required");
  double s = 0;
  for (float x : v.data) s += static_cast<double>(x) * x;
  double nrm = std::sqrt(s);
  if (nrm == 0.0) throw Error("nff_effective_weight: zero-norm direction");
  Tensor out = v;
  for (float& x : out.data) x = static_cast<float>(g * (x / nrm));
  return out;
}

enum class ModulatorInit { Identity, OrthogonalU, Given };

/// Reparameterized convolution: a frozen k x k filter bank W_s followed by a
/// per-task 1 x 1 modulator W_t (optionally in NFF form w = g * v/||v||).
/// The bank may be wider or narrower than c_out when rank truncation is in
/// play; modulators are [c_out, bank].
class RcmConv {
 public:
  struct Modulator {
    Parameter v;     // [cout, bank], NFF direction rows
    Parameter g;     // [cout], NFF scales
    Parameter w;     // [cout, bank], plain form when NFF is off
    Parameter bias;  // [cout]
    bool nff = false;
  };

  RcmConv() = default;

  /// `shared_weight` is [bank, cin, k, k]. `bank_trainable` is only ever true
  /// while pretraining the factored architecture; freeze() is one-way and
  /// required before any task modulator can be added.
  RcmConv(std::string name, Tensor shared_weight, int stride, int pad, int c_out,
          bool nff, bool bank_trainable = false)
      : name_(std::move(name)),
        shared_(name_ + ".shared", std::move(shared_weight), bank_trainable),
        stride_(stride),
        pad_(pad),
        c_out_(c_out),
        nff_(nff) {}

  const Parameter& shared() const { return shared_; }
  Parameter& shared_mutable() { return shared_; }
  int bank() const { return shared_.value.dim(0); }
  int c_out() const { return c_out_; }
  int stride() const { return stride_; }
  int pad() const { return pad_; }
  bool nff_enabled() const { return nff_; }
  bool frozen() const { return !shared_.trainable; }
  const std::string& name() const { return name_; }

  void freeze() { shared_.trainable = false; }

  bool has_task(const TaskId& t) const { return mods_.count(t) > 0; }
  const std::map<TaskId, Modulator>& modulators() const { return mods_; }
  Modulator& modulator(const TaskId& t) {
    auto it = mods_.find(t);
    if (it == mods_.end()) throw Error("rcm: unknown task " + t);
    return it->second;
  }
  const Modulator& modulator(const TaskId& t) const {
    auto it = mods_.find(t);
    if (it == mods_.end()) throw Error("rcm: unknown task " + t);
    return it->second;
  }

  /// Default modulator rows for newly registered tasks (the U from response
  /// initialization when present, identity otherwise).
  void set_default_init(Tensor u) { default_init_ = std::move(u); }
  const std::optional<Tensor>& default_init() const { return default_init_; }

  /// Allocates a fresh modulator for `task`. With NFF the v rows take the
  /// init rows and g starts at each row's norm, so rows of an orthogonal U
  /// give g == 1 and an unchanged effective weight.
  void add_task(const TaskId& task, ModulatorInit init, const Tensor* given = nullptr,
                const Tensor* bias = nullptr) {
    if (mods_.count(task)) throw Error("rcm: duplicate task " + task);
    if (!frozen()) throw Error("rcm: freeze the filter bank before adding tasks");
    Tensor rows({c_out_, bank()});
    switch (init) {
      case ModulatorInit::Identity:
        if (bank() != c_out_) throw Error("rcm: identity init needs bank == c_out");
        for (int i = 0; i < c_out_; ++i) rows.at2(i, i) = 1.0f;
        break;
      case ModulatorInit::OrthogonalU:
        if (!default_init_) throw Error("rcm: no stored init (run response init first)");
        rows = *default_init_;
        break;
      case ModulatorInit::Given:
        if (!given || given->ndim() != 2 || given->dim(0) != c_out_ || given->dim(1) != bank())
          throw Error("rcm: bad given modulator shape");
        rows = *given;
        break;
    }
    Modulator m;
    m.nff = nff_;
    std::string base = name_ + ".task." + task;
    m.bias = Parameter(base + ".bias",
                       bias ? *bias : Tensor({c_out_}), true);
    if (nff_) {
      Tensor g({c_out_});
      for (int i = 0; i < c_out_; ++i) {
        double s = 0;
        for (int j = 0; j < bank(); ++j) s += static_cast<double>(rows.at2(i, j)) * rows.at2(i, j);
        double nrm = std::sqrt(s);
        if (nrm == 0.0) throw Error("rcm: zero-norm init row");
        g[i] = static_cast<float>(nrm);
      }
      m.v = Parameter(base + ".v", rows, true);
      m.g = Parameter(base + ".g", g, true);
    } else {
      m.w = Parameter(base + ".w", rows, true);
    }
    mods_.emplace(task, std::move(m));
  }

  void remove_task(const TaskId& task) { mods_.erase(task); }

  /// Effective 1 x 1 weight as a graph node (gradients flow into v/g or w).
  NodeP<float> modulator_node(const TaskId& task) {
    Modulator& m = modulator(task);
    if (m.nff) return nff_rows(leaf(m.v), leaf(m.g));
    return leaf(m.w);
  }

  /// Deployment fold: w rows = g * v/||v||. Idempotent in the sense that
  /// folding the folded weight (with g set to the row norms) reproduces it.
  Tensor fold_nff(const TaskId& task) const {
    const Modulator& m = modulator(task);
    if (!m.nff) throw Error("rcm: fold_nff on a non-NFF modulator");
    Tensor out({c_out_, bank()});
    for (int i = 0; i < c_out_; ++i) {
      double s = 0;
      for (int j = 0; j < bank(); ++j) s += static_cast<double>(m.v.value.at2(i, j)) * m.v.value.at2(i, j);
      double nrm = std::sqrt(s);
      if (nrm == 0.0) throw Error("rcm: zero-norm v row in fold");
      for (int j = 0; j < bank(); ++j)
        out.at2(i, j) = static_cast<float>(m.g.value[i] * (m.v.value.at2(i, j) / nrm));
    }
    return out;
  }

  /// Pre-BN forward: 1x1(W_t) applied to conv_kxk(W_s, x), plus per-task bias.
  NodeP<float> forward_pre_bn(const NodeP<float>& x, const TaskId& task) {
    Modulator& m = modulator(task);
    auto bank_out = conv2d(x, leaf(shared_), stride_, pad_);
    auto wt = modulator_node(task);
    // reshape [cout, bank] -> [cout, bank, 1, 1] view for the 1x1 conv
    auto wt4 = reshape_to_conv1x1(wt);
    return conv2d(bank_out, wt4, leaf(m.bias), 1, 0);
  }

  /// Same forward but with an explicit (already folded) 1x1 weight.
  NodeP<float> forward_pre_bn_folded(const NodeP<float>& x, const TaskId& task,
                                     const Tensor& folded_w) {
    Modulator& m = modulator(task);
    auto bank_out = conv2d(x, leaf(shared_), stride_, pad_);
    Tensor w4 = folded_w;
    w4.shape = {c_out_, bank(), 1, 1};
    return conv2d(bank_out, constant(w4), leaf(m.bias), 1, 0);
  }

  static NodeP<float> reshape_to_conv1x1(const NodeP<float>& w) {
    int r = w->value.dim(0), c = w->value.dim(1);
    TensorT<float> y = w->value;
    y.shape = {r, c, 1, 1};
    auto out = make_node(std::move(y));
    out->inputs = {w};
    NodeT<float>* self = out.get();
    NodeT<float>* wn = w.get();
    out->backprop = [self, wn, r, c]() {
      TensorT<float> g = self->grad;
      g.shape = {r, c};
      wn->add_grad(g);
    };
    return out;
  }

 private:
  std::string name_;
  Parameter shared_;
  int stride_ = 1;
  int pad_ = 0;
  int c_out_ = 0;
  bool nff_ = false;
  std::map<TaskId, Modulator> mods_;
  std::optional<Tensor> default_init_;
};

enum class AdapterTopology { Series, Parallel };

/// Residual adapter on top of a frozen base convolution: a per-task 1 x 1
/// convolution added in series (on the base output) or in parallel (on the
/// base input; base stride must be 1).
class AdapterConv {
 public:
  AdapterConv() = default;
  AdapterConv(std::string name, Parameter base_w, Parameter base_b, int stride, int pad,
              AdapterTopology topo)
      : name_(std::move(name)),
        base_w_(std::move(base_w)),
        base_b_(std::move(base_b)),
        stride_(stride),
        pad_(pad),
        topo_(topo) {
    base_w_.trainable = false;
    base_b_.trainable = false;
    if (topo_ == AdapterTopology::Parallel && stride_ != 1)
      throw Error("adapter: parallel topology requires base stride 1");
  }

  AdapterTopology topology() const { return topo_; }
  const Parameter& base_weight() const { return base_w_; }
  Parameter& base_weight_mutable() { return base_w_; }
  Parameter& base_bias_mutable() { return base_b_; }
  int c_out() const { return base_w_.value.dim(0); }
  int c_in() const { return base_w_.value.dim(1); }

  void add_task(const TaskId& task) {
    if (adapters_.count(task)) throw Error("adapter: duplicate task " + task);
    int c = topo_ == AdapterTopology::Series ? c_out() : c_in();
    adapters_.emplace(task, Parameter(name_ + ".task." + task + ".adapter",
                                      Tensor({c_out(), c, 1, 1}), true));
    adapter_bias_.emplace(task, Parameter(name_ + ".task." + task + ".adapter_bias",
                                          Tensor({c_out()}), true));
  }

  bool has_task(const TaskId& t) const { return adapters_.count(t) > 0; }
  Parameter& adapter(const TaskId& t) {
    auto it = adapters_.find(t);
    if (it == adapters_.end()) throw Error("adapter: unknown task " + t);
    return it->second;
  }
  Parameter& adapter_bias(const TaskId& t) { return adapter_bias_.at(t); }
  std::map<TaskId, Parameter>& adapters() { return adapters_; }
  std::map<TaskId, Parameter>& adapter_biases() { return adapter_bias_; }

  /// Pre-BN forward (BN is applied by the caller after the merge).
  NodeP<float> forward_pre_bn(const NodeP<float>& x, const TaskId& task) {
    Parameter& a = adapter(task);
    Parameter& ab = adapter_bias_.at(task);
    auto base = conv2d(x, leaf(base_w_), leaf(base_b_), stride_, pad_);
    if (topo_ == AdapterTopology::Series)
      return add(base, conv2d(base, leaf(a), leaf(ab), 1, 0));
    return add(base, conv2d(x, leaf(a), leaf(ab), 1, 0));
  }

 private:
  std::string name_;
  Parameter base_w_;
  Parameter base_b_;
  int stride_ = 1;
  int pad_ = 0;
  AdapterTopology topo_ = AdapterTopology::Series;
  std::map<TaskId, Parameter> adapters_;
  std::map<TaskId, Parameter> adapter_bias_;
};

}  // namespace rcm
