#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rcm/tensor.hpp"

namespace rcm {

/// Named, optionally trainable weight tensor. Gradients accumulate here
/// when backward() reaches the parameter's leaf node. Non-trainable
/// parameters still receive gradients (the interference analysis reads
/// them); optimizers skip them.
template <class T>
struct ParameterT {
  std::string name;
  TensorT<T> value;
  std::optional<TensorT<T>> grad;
  bool trainable = true;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<T> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  void zero_grad() { grad.reset(); }

  void accum_grad(const TensorT<T>& g) {
    if (!g.same_shape(value)) throw Error("grad shape mismatch on " + name);
    if (!grad) {
      grad = g;
    } else {
      for (size_t i = 0; i < g.data.size(); ++i) grad->data[i] += g.data[i];
    }
  }
};

using Parameter = ParameterT<float>;

template <class T>
struct NodeT;
template <class T>
using NodeP = std::shared_ptr<NodeT<T>>;

/// One vertex of the reverse-mode tape. `backprop` reads this node's grad
/// and accumulates into the inputs' grads; leaves bound to a Parameter
/// flush into Parameter::grad instead.
template <class T>
struct NodeT {
  TensorT<T> value;
  TensorT<T> grad;
  bool has_grad = false;
  std::vector<NodeP<T>> inputs;
  std::function<void()> backprop;
  ParameterT<T>* param = nullptr;
  bool backward_done = false;

  void add_grad(const TensorT<T>& g) {
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      for (size_t i = 0; i < g.data.size(); ++i) grad.data[i] += g.data[i];
    }
  }
};

template <class T>
NodeP<T> make_node(TensorT<T> value) {
  auto n = std::make_shared<NodeT<T>>();
  n->value = std::move(value);
  return n;
}

/// Constant input (no gradient flows past it).
template <class T>
NodeP<T> constant(TensorT<T> value) {
  check_finite(value, "constant");
  return make_node(std::move(value));
}

/// Leaf bound to a parameter; the value is snapshotted at graph build time.
template <class T>
NodeP<T> leaf(ParameterT<T>& p) {
  auto n = make_node(p.value);
  n->param = &p;
  NodeT<T>* self = n.get();
  n->backprop = [self]() { self->param->accum_grad(self->grad); };
  return n;
}

/// Runs reverse-mode accumulation from a scalar loss. Visits each node
/// exactly once in reverse topological order.
template <class T>
void backward(const NodeP<T>& loss) {
  if (!loss || loss->value.numel() != 1)
    throw Error("backward: loss must be a scalar node");
  if (loss->backward_done) throw Error("backward: repeated backward without reset");

  std::vector<NodeT<T>*> topo;
  std::unordered_set<NodeT<T>*> seen;
  std::vector<std::pair<NodeT<T>*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT<T>* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  loss->add_grad(TensorT<T>::scalar(T(1)));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    NodeT<T>* n = *it;
    if (n->has_grad && n->backprop) n->backprop();
  }
  loss->backward_done = true;
}

// ---------------------------------------------------------------------------
// Dense kernels shared by forward and backward passes.
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n]
template <class T>
void matmul_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<size_t>(i) * k;
    T* c = C + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = a[p];
      if (av == T(0)) continue;
      const T* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

/// C[m,n] += A^T where A is [k,m], B is [k,n]
template <class T>
void matmul_at_b_acc(const T* A, const T* B, T* C, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const T* a = A + static_cast<size_t>(p) * m;
    const T* b = B + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      T av = a[i];
      if (av == T(0)) continue;
      T* c = C + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

/// C[m,n] += A[m,k] * B^T where B is [n,k]
template <class T>
void matmul_a_bt_acc(const T* A, const T* B, T* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<size_t>(i) * k;
    T* c = C + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* b = B + static_cast<size_t>(j) * k;
      T s = T(0);
      for (int p = 0; p < k; ++p) s += a[p] * b[p];
      c[j] += s;
    }
  }
}

struct ConvGeom {
  int n, cin, h, w, cout, k, stride, pad, oh, ow;
};

template <class T>
ConvGeom conv_geometry(const TensorT<T>& x, const TensorT<T>& wgt, int stride, int pad) {
  if (x.ndim() != 4) throw Error("conv2d: input must be 4-D NCHW");
  if (wgt.ndim() != 4) throw Error("conv2d: weight must be [cout,cin,k,k]");
  if (wgt.dim(2) != wgt.dim(3)) throw Error("conv2d: only square kernels supported");
  if (wgt.dim(1) != x.dim(1)) throw Error("conv2d: channel mismatch");
  if (stride < 1 || pad < 0 || wgt.dim(2) < 1) throw Error("conv2d: bad stride/pad/k");
  ConvGeom g;
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = wgt.dim(0);
  g.k = wgt.dim(2);
  g.stride = stride;
  g.pad = pad;
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  if (g.oh < 1 || g.ow < 1) throw Error("conv2d: output would be empty");
  return g;
}

/// col is [cin*k*k, oh*ow] for one sample.
template <class T>
void im2col(const TensorT<T>& x, int sample, const ConvGeom& g, std::vector<T>& col) {
  const int cols = g.oh * g.ow;
  col.assign(static_cast<size_t>(g.cin) * g.k * g.k * cols, T(0));
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col.data() + (static_cast<size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        for (int oy = 0; oy < g.oh; ++oy) {
          int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.ow; ++ox) {
            int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            row[oy * g.ow + ox] = x.at4(sample, c, iy, ix);
          }
        }
      }
}

template <class T>
void col2im_acc(const std::vector<T>& col, int sample, const ConvGeom& g, TensorT<T>& dx) {
  const int cols = g.oh * g.ow;
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col.data() + (static_cast<size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        for (int oy = 0; oy < g.oh; ++oy) {
          int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.ow; ++ox) {
            int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            dx.at4(sample, c, iy, ix) += row[oy * g.ow + ox];
          }
        }
      }
}

// ---------------------------------------------------------------------------
// Differentiable ops.
// ---------------------------------------------------------------------------

/// 2-D convolution, im2col + matrix multiply.
template <class T>
NodeP<T> conv2d(const NodeP<T>& x, const NodeP<T>& weight, const NodeP<T>& bias,
                int stride, int pad) {
  check_finite(x->value, "conv2d input");
  ConvGeom g = conv_geometry(x->value, weight->value, stride, pad);
  if (bias && (bias->value.ndim() != 1 || bias->value.dim(0) != g.cout))
    throw Error("conv2d: bias must be [cout]");

  TensorT<T> y({g.n, g.cout, g.oh, g.ow});
  const int cols = g.oh * g.ow;
  const int kdim = g.cin * g.k * g.k;
  std::vector<T> col;
  for (int s = 0; s < g.n; ++s) {
    im2col(x->value, s, g, col);
    matmul_acc(weight->value.data.data(), col.data(),
               y.data.data() + static_cast<size_t>(s) * g.cout * cols, g.cout, kdim, cols);
  }
  if (bias)
    for (int s = 0; s < g.n; ++s)
      for (int c = 0; c < g.cout; ++c) {
        T b = bias->value[c];
        T* p = y.data.data() + (static_cast<size_t>(s) * g.cout + c) * cols;
        for (int i = 0; i < cols; ++i) p[i] += b;
      }
  check_finite(y, "conv2d output");

  auto out = make_node(std::move(y));
  out->inputs = {x, weight};
  if (bias) out->inputs.push_back(bias);
  NodeT<T>* self = out.get();
  NodeT<T>* xn = x.get();
  NodeT<T>* wn = weight.get();
  NodeT<T>* bn = bias ? bias.get() : nullptr;
  out->backprop = [self, xn, wn, bn, g, cols, kdim]() {
    TensorT<T> dx = TensorT<T>::zeros_like(xn->value);
    TensorT<T> dw = TensorT<T>::zeros_like(wn->value);
    std::vector<T> col, dcol;
    for (int s = 0; s < g.n; ++s) {
      const T* dy = self->grad.data.data() + static_cast<size_t>(s) * g.cout * cols;
      im2col(xn->value, s, g, col);
      // dW += dY * col^T
      matmul_a_bt_acc(dy, col.data(), dw.data.data(), g.cout, cols, kdim);
      // dcol = W^T * dY
      dcol.assign(static_cast<size_t>(kdim) * cols, T(0));
      matmul_at_b_acc(wn->value.data.data(), dy, dcol.data(), g.cout, kdim, cols);
      col2im_acc(dcol, s, g, dx);
    }
    xn->add_grad(dx);
    wn->add_grad(dw);
    if (bn) {
      TensorT<T> db({g.cout});
      for (int s = 0; s < g.n; ++s)
        for (int c = 0; c < g.cout; ++c) {
          const T* dy = self->grad.data.data() + (static_cast<size_t>(s) * g.cout + c) * cols;
          T acc = T(0);
          for (int i = 0; i < cols; ++i) acc += dy[i];
          db[c] += acc;
        }
      bn->add_grad(db);
    }
  };
  return out;
}

template <class T>
NodeP<T> conv2d(const NodeP<T>& x, const NodeP<T>& weight, int stride, int pad) {
  return conv2d(x, weight, NodeP<T>(), stride, pad);
}

template <class T>
NodeP<T> relu(const NodeP<T>& x) {
  TensorT<T> y = x->value;
  for (T& v : y.data) v = v > T(0) ? v : T(0);
  auto out = make_node(std::move(y));
  out->inputs = {x};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = x.get();
  out->backprop = [self, xn]() {
    TensorT<T> dx = self->grad;
    for (size_t i = 0; i < dx.data.size(); ++i)
      if (xn->value.data[i] <= T(0)) dx.data[i] = T(0);
    xn->add_grad(dx);
  };
  return out;
}

template <class T>
NodeP<T> add(const NodeP<T>& a, const NodeP<T>& b) {
  if (!a->value.same_shape(b->value)) throw Error("add: shape mismatch");
  TensorT<T> y = a->value;
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += b->value.data[i];
  auto out = make_node(std::move(y));
  out->inputs = {a, b};
  NodeT<T>* self = out.get();
  NodeT<T>* an = a.get();
  NodeT<T>* bn = b.get();
  out->backprop = [self, an, bn]() {
    an->add_grad(self->grad);
    bn->add_grad(self->grad);
  };
  return out;
}

template <class T>
NodeP<T> scale(const NodeP<T>& a, T c) {
  TensorT<T> y = a->value;
  for (T& v : y.data) v *= c;
  auto out = make_node(std::move(y));
  out->inputs = {a};
  NodeT<T>* self = out.get();
  NodeT<T>* an = a.get();
  out->backprop = [self, an, c]() {
    TensorT<T> dx = self->grad;
    for (T& v : dx.data) v *= c;
    an->add_grad(dx);
  };
  return out;
}

template <class T>
NodeP<T> sum_all(const NodeP<T>& a) {
  T acc = T(0);
  for (T v : a->value.data) acc += v;
  auto out = make_node(TensorT<T>::scalar(acc));
  out->inputs = {a};
  NodeT<T>* self = out.get();
  NodeT<T>* an = a.get();
  out->backprop = [self, an]() {
    TensorT<T> dx(an->value.shape, self->grad[0]);
    an->add_grad(dx);
  };
  return out;
}

/// Elementwise product (used by small oracle graphs in tests).
template <class T>
NodeP<T> mul(const NodeP<T>& a, const NodeP<T>& b) {
  if (!a->value.same_shape(b->value)) throw Error("mul: shape mismatch");
  TensorT<T> y = a->value;
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] *= b->value.data[i];
  auto out = make_node(std::move(y));
  out->inputs = {a, b};
  NodeT<T>* self = out.get();
  NodeT<T>* an = a.get();
  NodeT<T>* bn = b.get();
  out->backprop = [self, an, bn]() {
    TensorT<T> da = self->grad, db = self->grad;
    for (size_t i = 0; i < da.data.size(); ++i) {
      da.data[i] *= bn->value.data[i];
      db.data[i] *= an->value.data[i];
    }
    an->add_grad(da);
    bn->add_grad(db);
  };
  return out;
}

/// Broadcast a scalar-per-row weight across matrix rows: out[i,:] = a[i,:] * s[i].
/// Nearest-neighbor upsampling by integer factor.
template <class T>
NodeP<T> nearest_upsample(const NodeP<T>& x, int factor) {
  if (factor < 1) throw Error("nearest_upsample: factor must be >= 1");
  if (x->value.ndim() != 4) throw Error("nearest_upsample: 4-D input required");
  if (factor == 1) return x;
  int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  TensorT<T> y({n, c, h * factor, w * factor});
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < h * factor; ++oy)
        for (int ox = 0; ox < w * factor; ++ox)
          y.at4(s, ch, oy, ox) = x->value.at4(s, ch, oy / factor, ox / factor);
  auto out = make_node(std::move(y));
  out->inputs = {x};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = x.get();
  out->backprop = [self, xn, n, c, h, w, factor]() {
    TensorT<T> dx({n, c, h, w});
    for (int s = 0; s < n; ++s)
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < h * factor; ++oy)
          for (int ox = 0; ox < w * factor; ++ox)
            dx.at4(s, ch, oy / factor, ox / factor) += self->grad.at4(s, ch, oy, ox);
    xn->add_grad(dx);
  };
  return out;
}

/// [N,C,H,W] -> [N,C] spatial mean.
template <class T>
NodeP<T> global_avg_pool(const NodeP<T>& x) {
  if (x->value.ndim() != 4) throw Error("global_avg_pool: 4-D input required");
  int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  T inv = T(1) / static_cast<T>(h * w);
  TensorT<T> y({n, c});
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      T acc = T(0);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) acc += x->value.at4(s, ch, i, j);
      y.at2(s, ch) = acc * inv;
    }
  auto out = make_node(std::move(y));
  out->inputs = {x};
  NodeT<T>* self = out.get();
  NodeT<T>* xn = x.get();
  out->backprop = [self, xn, n, c, h, w, inv]() {
    TensorT<T> dx({n, c, h, w});
    for (int s = 0; s < n; ++s)
      for (int ch = 0; ch < c; ++ch) {
        T g = self->grad.at2(s, ch) * inv;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) dx.at4(s, ch, i, j) = g;
      }
    xn->add_grad(dx);
  };
  return out;
}

/// x[N,C] * W^T[out,C] + b -> [N,out]
template <class T>
NodeP<T> linear(const NodeP<T>& x, const NodeP<T>& weight, const NodeP<T>& bias) {
  if (x->value.ndim() != 2 || weight->value.ndim() != 2 ||
      x->value.dim(1) != weight->value.dim(1))
    throw Error("linear: shape mismatch");
  int n = x->value.dim(0), c = x->value.dim(1), o = weight->value.dim(0);
  TensorT<T> y({n, o});
  matmul_a_bt_acc(x->value.data.data(), weight->value.data.data(), y.data.data(), n, c, o);
  if (bias)
    for (int s = 0; s < n; ++s)
      for (int j = 0; j < o; ++j) y.at2(s, j) += bias->value[j];
  auto out = make_node(std::move(y));
  out->inputs = {x, weight};
  if (bias) out->inputs.push_back(bias);
  NodeT<T>* self = out.get();
  NodeT<T>* xn = x.get();
  NodeT<T>* wn = weight.get();
  NodeT<T>* bn = bias ? bias.get() : nullptr;
  out->backprop = [self, xn, wn, bn, n, c, o]() {
    TensorT<T> dx({n, c});
    matmul_acc(self->grad.data.data(), wn->value.data.data(), dx.data.data(), n, o, c);
    TensorT<T> dw({o, c});
    matmul_at_b_acc(self->grad.data.data(), xn->value.data.data(), dw.data.data(), n, o, c);
    xn->add_grad(dx);
    wn->add_grad(dw);
    if (bn) {
      TensorT<T> db({o});
      for (int s = 0; s < n; ++s)
        for (int j = 0; j < o; ++j) db[j] += self->grad.at2(s, j);
      bn->add_grad(db);
    }
  };
  return out;
}

/// Row-wise weight normalization: out[i,:] = g[i] * v[i,:] / ||v[i,:]||.
/// Gradient flows through both v and g via the quotient rule.
template <class T>
NodeP<T> nff_rows(const NodeP<T>& v, const NodeP<T>& g) {
  if (v->value.ndim() != 2 || g->value.ndim() != 1 || g->value.dim(0) != v->value.dim(0))
    throw Error("nff_rows: v must be [rows,cols], g must be [rows]");
  int rows = v->value.dim(0), cols = v->value.dim(1);
  std::vector<T> norms(static_cast<size_t>(rows));
  TensorT<T> y({rows, cols});
  for (int i = 0; i < rows; ++i) {
    double s = 0;
    for (int j = 0; j < cols; ++j) {
      double x = v->value.at2(i, j);
      s += x * x;
    }
    T nrm = static_cast<T>(std::sqrt(s));
    if (nrm == T(0)) throw Error("nff_rows: zero-norm direction row");
    norms[static_cast<size_t>(i)] = nrm;
    T sc = g->value[i] / nrm;
    for (int j = 0; j < cols; ++j) y.at2(i, j) = sc * v->value.at2(i, j);
  }
  auto out = make_node(std::move(y));
  out->inputs = {v, g};
  NodeT<T>* self = out.get();
  NodeT<T>* vn = v.get();
  NodeT<T>* gn = g.get();
  out->backprop = [self, vn, gn, rows, cols, norms]() {
    TensorT<T> dv({rows, cols});
    TensorT<T> dg({rows});
    for (int i = 0; i < rows; ++i) {
      T nrm = norms[static_cast<size_t>(i)];
      T gi = gn->value[i];
      // vhat . dw
      T dot = T(0);
      for (int j = 0; j < cols; ++j)
        dot += self->grad.at2(i, j) * (vn->value.at2(i, j) / nrm);
      dg[i] = dot;
      for (int j = 0; j < cols; ++j) {
        T vhat = vn->value.at2(i, j) / nrm;
        dv.at2(i, j) = gi / nrm * (self->grad.at2(i, j) - dot * vhat);
      }
    }
    vn->add_grad(dv);
    gn->add_grad(dg);
  };
  return out;
}

}  // namespace rcm
