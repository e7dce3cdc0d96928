#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rcm/autograd.hpp"

namespace rcm {

enum class Mode { Train, Eval };

/// Batch-norm state for one [N,C,H,W] site. gamma/beta are parameters;
/// the running statistics are plain state updated in-place by train-mode
/// forward passes.
template <class T>
struct BatchNormT {
  ParameterT<T> gamma;
  ParameterT<T> beta;
  TensorT<T> running_mean;
  TensorT<T> running_var;
  T eps = static_cast<T>(1e-5);

  BatchNormT() = default;
  BatchNormT(const std::string& name_prefix, int channels, bool trainable = true)
      : gamma(name_prefix + ".gamma", TensorT<T>({channels}, T(1)), trainable),
        beta(name_prefix + ".beta", TensorT<T>({channels}, T(0)), trainable),
        running_mean(TensorT<T>({channels}, T(0))),
        running_var(TensorT<T>({channels}, T(1))) {}

  int channels() const { return gamma.value.dim(0); }

  /// Deep copy under a new name prefix (per-task cloning).
  BatchNormT clone(const std::string& name_prefix, bool trainable) const {
    BatchNormT out;
    out.gamma = ParameterT<T>(name_prefix + ".gamma", gamma.value, trainable);
    out.beta = ParameterT<T>(name_prefix + ".beta", beta.value, trainable);
    out.running_mean = running_mean;
    out.running_var = running_var;
    out.eps = eps;
    return out;
  }
};

using BatchNorm = BatchNormT<float>;

/// Batch normalization. Train mode normalizes by (biased) batch statistics
/// and updates the running stats as r = (1 - momentum) * r + momentum * batch.
/// Eval mode normalizes by the running stats and leaves them untouched.
template <class T>
NodeP<T> batchnorm(const NodeP<T>& x, BatchNormT<T>& bn, Mode mode, T momentum) {
  if (x->value.ndim() != 4) throw Error("batchnorm: 4-D input required");
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  if (bn.channels() != c) throw Error("batchnorm: channel mismatch");
  if (bn.eps <= T(0)) throw Error("batchnorm: eps must be positive");
  const int64_t per_ch = static_cast<int64_t>(n) * h * w;

  auto gamma = leaf(bn.gamma);
  auto beta = leaf(bn.beta);

  std::vector<T> mean(static_cast<size_t>(c)), var(static_cast<size_t>(c));
  if (mode == Mode::Train) {
    for (int ch = 0; ch < c; ++ch) {
      double m = 0;
      for (int s = 0; s < n; ++s)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) m += x->value.at4(s, ch, i, j);
      m /= static_cast<double>(per_ch);
      double v = 0;
      for (int s = 0; s < n; ++s)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            double d = x->value.at4(s, ch, i, j) - m;
            v += d * d;
          }
      v /= static_cast<double>(per_ch);
      mean[static_cast<size_t>(ch)] = static_cast<T>(m);
      var[static_cast<size_t>(ch)] = static_cast<T>(v);
      bn.running_mean[ch] = (T(1) - momentum) * bn.running_mean[ch] + momentum * static_cast<T>(m);
      bn.running_var[ch] = (T(1) - momentum) * bn.running_var[ch] + momentum * static_cast<T>(v);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[static_cast<size_t>(ch)] = bn.running_mean[ch];
      var[static_cast<size_t>(ch)] = bn.running_var[ch];
    }
  }

  TensorT<T> xhat({n, c, h, w});
  TensorT<T> y({n, c, h, w});
  std::vector<T> inv_std(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    T is = T(1) / static_cast<T>(std::sqrt(static_cast<double>(var[static_cast<size_t>(ch)]) +
                                           static_cast<double>(bn.eps)));
    inv_std[static_cast<size_t>(ch)] = is;
    T g = bn.gamma.value[ch], b = bn.beta.value[ch], m = mean[static_cast<size_t>(ch)];
    for (int s = 0; s < n; ++s)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          T xh = (x->value.at4(s, ch, i, j) - m) * is;
          xhat.at4(s, ch, i, j) = xh;
          y.at4(s, ch, i, j) = g * xh + b;
        }
  }
  check_finite(y, "batchnorm output");

  auto out = make_node(std::move(y));
  out->inputs = {x, gamma, beta};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = x.get();
  NodeT<T>* gn = gamma.get();
  NodeT<T>* bnn = beta.get();
  bool train = mode == Mode::Train;
  out->backprop = [self, xn, gn, bnn, xhat, inv_std, n, c, h, w, per_ch, train]() {
    TensorT<T> dgamma({c}), dbeta({c});
    for (int ch = 0; ch < c; ++ch) {
      double sg = 0, sb = 0;
      for (int s = 0; s < n; ++s)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            T dy = self->grad.at4(s, ch, i, j);
            sg += dy * xhat.at4(s, ch, i, j);
            sb += dy;
          }
      dgamma[ch] = static_cast<T>(sg);
      dbeta[ch] = static_cast<T>(sb);
    }
    TensorT<T> dx({n, c, h, w});
    for (int ch = 0; ch < c; ++ch) {
      T scale = gn->value[ch] * inv_std[static_cast<size_t>(ch)];
      if (train) {
        T mean_dy = dbeta[ch] / static_cast<T>(per_ch);
        T mean_dyxh = dgamma[ch] / static_cast<T>(per_ch);
        for (int s = 0; s < n; ++s)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              dx.at4(s, ch, i, j) =
                  scale * (self->grad.at4(s, ch, i, j) - mean_dy -
                           xhat.at4(s, ch, i, j) * mean_dyxh);
      } else {
        for (int s = 0; s < n; ++s)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              dx.at4(s, ch, i, j) = scale * self->grad.at4(s, ch, i, j);
      }
    }
    xn->add_grad(dx);
    gn->add_grad(dgamma);
    bnn->add_grad(dbeta);
  };
  return out;
}

/// Poly learning-rate schedule: base * (1 - iter/max_iter)^power.
inline double poly_lr(double base_lr, int iter, int max_iter, double power) {
  if (max_iter <= 0) throw Error("poly_lr: max_iter must be positive");
  if (iter < 0 || iter > max_iter) throw Error("poly_lr: iter out of range");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / max_iter, power);
}

/// Momentum SGD with L2 weight decay. Momentum buffers persist across
/// step() calls, keyed by parameter name; they are not checkpointed.
template <class T>
class SgdT {
 public:
  SgdT(T momentum, T weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<ParameterT<T>*>& params, T lr) {
    for (ParameterT<T>* p : params) {
      if (!p->trainable) continue;
      if (!p->grad) throw Error("sgd: missing grad on trainable parameter " + p->name);
      auto [it, inserted] = buffers_.try_emplace(p->name, TensorT<T>::zeros_like(p->value));
      TensorT<T>& buf = it->second;
      for (size_t i = 0; i < p->value.data.size(); ++i) {
        T g = p->grad->data[i] + weight_decay_ * p->value.data[i];
        buf.data[i] = momentum_ * buf.data[i] + g;
        p->value.data[i] -= lr * buf.data[i];
      }
      check_finite(p->value, "sgd-updated parameter");
    }
  }

  static void zero_grads(const std::vector<ParameterT<T>*>& params) {
    for (ParameterT<T>* p : params) p->zero_grad();
  }

 private:
  T momentum_;
  T weight_decay_;
  std::map<std::string, TensorT<T>> buffers_;
};

using Sgd = SgdT<float>;

// ---------------------------------------------------------------------------
// Losses. Each returns a scalar node, already multiplied by `weight`.
// ---------------------------------------------------------------------------

/// Per-pixel binary cross entropy on logits with class weights
/// (w_pos on target==1, w_neg on target==0), mean-reduced.
template <class T>
NodeP<T> weighted_bce_loss(const NodeP<T>& logits, const TensorT<T>& target,
                           T w_pos, T w_neg, T weight) {
  if (!logits->value.same_shape(target)) throw Error("bce: shape mismatch");
  const int64_t count = logits->value.numel();
  const T inv = weight / static_cast<T>(count);
  double acc = 0;
  for (int64_t i = 0; i < count; ++i) {
    double x = logits->value[i];
    double t = target[i];
    double w = t > 0.5 ? w_pos : w_neg;
    // softplus(x) - t*x, computed stably
    double sp = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    acc += w * (sp - t * x);
  }
  auto out = make_node(TensorT<T>::scalar(static_cast<T>(acc) * inv));
  check_finite(out->value, "bce loss");
  out->inputs = {logits};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = logits.get();
  out->backprop = [self, xn, target, w_pos, w_neg, inv, count]() {
    TensorT<T> dx = TensorT<T>::zeros_like(xn->value);
    T up = self->grad[0] * inv;
    for (int64_t i = 0; i < count; ++i) {
      double x = xn->value[i];
      double t = target[i];
      double w = t > 0.5 ? w_pos : w_neg;
      double sig = 1.0 / (1.0 + std::exp(-x));
      dx[i] = up * static_cast<T>(w * (sig - t));
    }
    xn->add_grad(dx);
  };
  return out;
}

/// Softmax cross entropy over the channel axis of [N,C,H,W] logits against
/// an integer class map [N,H,W] (stored as floats), mean-reduced.
template <class T>
NodeP<T> cross_entropy_loss(const NodeP<T>& logits, const TensorT<T>& labels, T weight) {
  if (logits->value.ndim() != 4) throw Error("cross_entropy: 4-D logits required");
  const int n = logits->value.dim(0), c = logits->value.dim(1);
  const int h = logits->value.dim(2), w = logits->value.dim(3);
  if (labels.ndim() != 3 || labels.dim(0) != n || labels.dim(1) != h || labels.dim(2) != w)
    throw Error("cross_entropy: label shape mismatch");
  const int64_t count = static_cast<int64_t>(n) * h * w;
  const T inv = weight / static_cast<T>(count);

  // softmax probabilities cached for backward
  TensorT<T> prob({n, c, h, w});
  double acc = 0;
  for (int s = 0; s < n; ++s)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double mx = -1e300;
        for (int ch = 0; ch < c; ++ch) mx = std::max(mx, (double)logits->value.at4(s, ch, i, j));
        double z = 0;
        for (int ch = 0; ch < c; ++ch) {
          double e = std::exp((double)logits->value.at4(s, ch, i, j) - mx);
          prob.at4(s, ch, i, j) = static_cast<T>(e);
          z += e;
        }
        int lbl = static_cast<int>(labels.data[(static_cast<size_t>(s) * h + i) * w + j]);
        if (lbl < 0 || lbl >= c) throw Error("cross_entropy: label out of range");
        for (int ch = 0; ch < c; ++ch)
          prob.at4(s, ch, i, j) = static_cast<T>(prob.at4(s, ch, i, j) / z);
        acc -= std::log(std::max((double)prob.at4(s, lbl, i, j), 1e-30));
      }
  auto out = make_node(TensorT<T>::scalar(static_cast<T>(acc) * inv));
  check_finite(out->value, "cross_entropy loss");
  out->inputs = {logits};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = logits.get();
  out->backprop = [self, xn, prob, labels, inv, n, c, h, w]() {
    TensorT<T> dx({n, c, h, w});
    T up = self->grad[0] * inv;
    for (int s = 0; s < n; ++s)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          int lbl = static_cast<int>(labels.data[(static_cast<size_t>(s) * h + i) * w + j]);
          for (int ch = 0; ch < c; ++ch)
            dx.at4(s, ch, i, j) = up * (prob.at4(s, ch, i, j) - (ch == lbl ? T(1) : T(0)));
        }
    xn->add_grad(dx);
  };
  return out;
}

/// Cross entropy for [N,C] classifier logits against [N] integer labels.
template <class T>
NodeP<T> cross_entropy_logits2d(const NodeP<T>& logits, const TensorT<T>& labels, T weight) {
  if (logits->value.ndim() != 2) throw Error("cross_entropy2d: 2-D logits required");
  const int n = logits->value.dim(0), c = logits->value.dim(1);
  if (labels.ndim() != 1 || labels.dim(0) != n) throw Error("cross_entropy2d: label mismatch");
  const T inv = weight / static_cast<T>(n);
  TensorT<T> prob({n, c});
  double acc = 0;
  for (int s = 0; s < n; ++s) {
    double mx = -1e300;
    for (int ch = 0; ch < c; ++ch) mx = std::max(mx, (double)logits->value.at2(s, ch));
    double z = 0;
    for (int ch = 0; ch < c; ++ch) {
      double e = std::exp((double)logits->value.at2(s, ch) - mx);
      prob.at2(s, ch) = static_cast<T>(e);
      z += e;
    }
    int lbl = static_cast<int>(labels[s]);
    if (lbl < 0 || lbl >= c) throw Error("cross_entropy2d: label out of range");
    for (int ch = 0; ch < c; ++ch) prob.at2(s, ch) = static_cast<T>(prob.at2(s, ch) / z);
    acc -= std::log(std::max((double)prob.at2(s, lbl), 1e-30));
  }
  auto out = make_node(TensorT<T>::scalar(static_cast<T>(acc) * inv));
  out->inputs = {logits};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = logits.get();
  out->backprop = [self, xn, prob, labels, inv, n, c]() {
    TensorT<T> dx({n, c});
    T up = self->grad[0] * inv;
    for (int s = 0; s < n; ++s) {
      int lbl = static_cast<int>(labels[s]);
      for (int ch = 0; ch < c; ++ch)
        dx.at2(s, ch) = up * (prob.at2(s, ch) - (ch == lbl ? T(1) : T(0)));
    }
    xn->add_grad(dx);
  };
  return out;
}

/// Mean absolute error, mean-reduced.
template <class T>
NodeP<T> l1_loss(const NodeP<T>& pred, const TensorT<T>& target, T weight) {
  if (!pred->value.same_shape(target)) throw Error("l1: shape mismatch");
  const int64_t count = pred->value.numel();
  const T inv = weight / static_cast<T>(count);
  double acc = 0;
  for (int64_t i = 0; i < count; ++i)
    acc += std::abs((double)pred->value[i] - (double)target[i]);
  auto out = make_node(TensorT<T>::scalar(static_cast<T>(acc) * inv));
  out->inputs = {pred};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = pred.get();
  out->backprop = [self, xn, target, inv, count]() {
    TensorT<T> dx = TensorT<T>::zeros_like(xn->value);
    T up = self->grad[0] * inv;
    for (int64_t i = 0; i < count; ++i) {
      double d = (double)xn->value[i] - (double)target[i];
      dx[i] = d > 0 ? up : (d < 0 ? -up : T(0));
    }
    xn->add_grad(dx);
  };
  return out;
}

}  // namespace rcm
