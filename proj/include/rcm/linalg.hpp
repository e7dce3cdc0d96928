#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "rcm/tensor.hpp"

namespace rcm {

/// Mean-subtracted response samples: Y is [c_out, n], mean is [c_out].
struct ResponseMatrix {
  Tensor Y;
  Tensor mean;
  int n = 0;
};

/// Symmetric eigendecomposition result. Eigenvectors on the columns of U,
/// eigenvalues in S sorted descending.
struct EigenPair {
  TensorD U;
  TensorD S;
};

inline ResponseMatrix center_responses(const Tensor& samples) {
  if (samples.ndim() != 2) throw Error("center_responses: 2-D [c_out, n] input required");
  const int c = samples.dim(0), n = samples.dim(1);
  if (n < 2) throw Error("center_responses: need at least 2 samples");
  ResponseMatrix out;
  out.n = n;
  out.mean = Tensor({c});
  out.Y = Tensor({c, n});
  for (int i = 0; i < c; ++i) {
    double m = 0;
    for (int j = 0; j < n; ++j) m += samples.at2(i, j);
    m /= n;
    out.mean[i] = static_cast<float>(m);
    for (int j = 0; j < n; ++j) out.Y.at2(i, j) = static_cast<float>(samples.at2(i, j) - m);
  }
  return out;
}

/// (1/n) Y Y^T. The 1/n scaling does not change the eigenvectors, which are
/// the only quantity consumed downstream.
inline TensorD covariance(const ResponseMatrix& rm) {
  const int c = rm.Y.dim(0), n = rm.Y.dim(1);
  TensorD cov({c, c});
  for (int i = 0; i < c; ++i)
    for (int j = i; j < c; ++j) {
      double s = 0;
      for (int t = 0; t < n; ++t)
        s += static_cast<double>(rm.Y.at2(i, t)) * rm.Y.at2(j, t);
      s /= n;
      cov.at2(i, j) = s;
      cov.at2(j, i) = s;
    }
  return cov;
}

namespace detail {

inline double offdiag_frobenius(const TensorD& a) {
  const int n = a.dim(0);
  double s = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) s += a.at2(i, j) * a.at2(i, j);
  return std::sqrt(s);
}

}  // namespace detail

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Convergence: off-diagonal Frobenius norm < 1e-10 * ||M||_F, budget of
/// 100 sweeps. Sign convention: the largest-magnitude entry of each
/// eigenvector is positive, ties broken by lowest index. Eigenvalues below
/// 1e-9 * S_max are clamped to zero; their eigenvectors are retained so U
/// stays a full orthogonal basis.
inline EigenPair sym_eig(const TensorD& m, std::vector<double>* sweep_offdiag = nullptr) {
  if (m.ndim() != 2 || m.dim(0) != m.dim(1)) throw Error("sym_eig: square matrix required");
  const int n = m.dim(0);
  double scale = m.max_abs();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (std::abs(m.at2(i, j) - m.at2(j, i)) > 1e-5 * std::max(1.0, scale))
        throw Error("sym_eig: input is not symmetric");

  TensorD a = m;
  TensorD u({n, n});
  for (int i = 0; i < n; ++i) u.at2(i, i) = 1.0;

  double norm_f = 0;
  for (double v : m.data) norm_f += v * v;
  norm_f = std::sqrt(norm_f);
  const double tol = 1e-10 * norm_f;
  const int max_sweeps = 100;

  bool converged = norm_f == 0.0;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    for (int p = 0; p < n - 1; ++p)
      for (int q = p + 1; q < n; ++q) {
        double apq = a.at2(p, q);
        if (apq == 0.0) continue;
        double app = a.at2(p, p), aqq = a.at2(q, q);
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int i = 0; i < n; ++i) {
          double aip = a.at2(i, p), aiq = a.at2(i, q);
          a.at2(i, p) = c * aip - s * aiq;
          a.at2(i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          double api = a.at2(p, i), aqi = a.at2(q, i);
          a.at2(p, i) = c * api - s * aqi;
          a.at2(q, i) = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          double uip = u.at2(i, p), uiq = u.at2(i, q);
          u.at2(i, p) = c * uip - s * uiq;
          u.at2(i, q) = s * uip + c * uiq;
        }
      }
    double off = detail::offdiag_frobenius(a);
    if (sweep_offdiag) sweep_offdiag->push_back(off);
    if (off < tol) converged = true;
  }
  if (!converged) throw Error("sym_eig: no convergence within the sweep budget");

  // Sort descending by eigenvalue.
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&a](int i, int j) { return a.at2(i, i) > a.at2(j, j); });

  EigenPair out;
  out.U = TensorD({n, n});
  out.S = TensorD({n});
  double smax = 0;
  for (int k = 0; k < n; ++k) smax = std::max(smax, std::abs(a.at2(order[k], order[k])));
  for (int k = 0; k < n; ++k) {
    int src = order[static_cast<size_t>(k)];
    double lambda = a.at2(src, src);
    if (std::abs(lambda) < 1e-9 * smax) lambda = 0.0;
    out.S[k] = lambda;
    // sign convention
    int best = 0;
    double best_abs = -1;
    for (int i = 0; i < n; ++i) {
      double v = std::abs(u.at2(i, src));
      if (v > best_abs + 0.0) {
        best_abs = v;
        best = i;
      }
    }
    double sign = u.at2(best, src) >= 0 ? 1.0 : -1.0;
    for (int i = 0; i < n; ++i) out.U.at2(i, k) = sign * u.at2(i, src);
  }
  return out;
}

/// max |U^T U - I|
inline double orthogonality_error(const TensorD& u) {
  const int n = u.dim(0);
  double worst = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < n; ++k) s += u.at2(k, i) * u.at2(k, j);
      worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}

/// max |U diag(S) U^T - M|
inline double reconstruction_error(const EigenPair& e, const TensorD& m) {
  const int n = m.dim(0);
  double worst = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < n; ++k) s += e.U.at2(i, k) * e.S[k] * e.U.at2(j, k);
      worst = std::max(worst, std::abs(s - m.at2(i, j)));
    }
  return worst;
}

}  // namespace rcm
