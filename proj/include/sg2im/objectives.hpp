#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "sg2im/ops.hpp"

namespace sg2im::objectives {

using ag::Var;

struct LossWeights {
  double lambda = 0.7;  // weight of the reconstruction term
  double beta = 0.5;    // weight of the CLIP term inside the alignment loss
  bool operator==(const LossWeights&) const = default;
};

inline void check_unit_interval(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
}

struct KernelSpec {
  std::vector<double> bandwidths;  // RBF sigmas; empty selects the median heuristic
  bool multi_scale = false;        // with the median heuristic: {s/2, s, 2s}
};

// Mean squared difference between true and predicted noise.
template <typename T>
Var<T> l_recon(const Var<T>& eps_true, const Var<T>& eps_pred) {
  require_same_shape(eps_true.shape(), eps_pred.shape(), "l_recon");
  return ag::mse(eps_true, eps_pred);
}

// Mean squared difference between graph embeddings and image embeddings.
template <typename T>
Var<T> l_clip(const Var<T>& g_global, const Var<T>& image_emb) {
  if (g_global.size() != image_emb.size())
    throw ShapeError("l_clip length mismatch " + shape_str(g_global.shape()) + " vs " + shape_str(image_emb.shape()));
  return ag::mse(g_global, ag::reshape(image_emb, g_global.shape()));
}

namespace detail {
template <typename T>
T sqdist(const T* a, const T* b, std::size_t d) {
  T s = T(0);
  for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}
}  // namespace detail

// sigma^2 = median pairwise squared distance of the joint set (1 if zero).
template <typename T>
double median_bandwidth(const Tensor<T>& xs, const Tensor<T>& ys) {
  const std::size_t d = xs.dim(1);
  std::vector<const T*> rows;
  for (std::size_t i = 0; i < xs.dim(0); ++i) rows.push_back(xs.ptr() + i * d);
  for (std::size_t i = 0; i < ys.dim(0); ++i) rows.push_back(ys.ptr() + i * d);
  std::vector<double> dists;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) dists.push_back(static_cast<double>(detail::sqdist(rows[i], rows[j], d)));
  if (dists.empty()) return 1.0;
  std::sort(dists.begin(), dists.end());
  const std::size_t n = dists.size();
  const double med = n % 2 ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
  return med > 0 ? std::sqrt(med) : 1.0;
}

template <typename T>
std::vector<double> resolve_bandwidths(const KernelSpec& k, const Tensor<T>& xs, const Tensor<T>& ys) {
  if (!k.bandwidths.empty()) {
    for (double s : k.bandwidths)
      if (!(s > 0)) throw std::invalid_argument("kernel bandwidths must be positive");
    return k.bandwidths;
  }
  const double s = median_bandwidth(xs, ys);
  if (k.multi_scale) return {0.5 * s, s, 2.0 * s};
  return {s};
}

// Biased (V-statistic) squared MMD with a sum of RBF kernels
// exp(-|u - v|^2 / (2 sigma^2)). xs: [n, d], ys: [m, d]. Each block mean is an
// order-independent sum, so mmd2(X, Y) == mmd2(Y, X) bitwise.
template <typename T>
Var<T> mmd2(const Var<T>& xs, const Var<T>& ys, const std::vector<double>& sigmas) {
  if (xs.shape().size() != 2 || ys.shape().size() != 2 || xs.dim(1) != ys.dim(1))
    throw ShapeError("mmd2 needs [n, d] and [m, d] sets");
  const std::size_t n = xs.dim(0), m = ys.dim(0), d = xs.dim(1);
  if (n == 0 || m == 0) throw std::invalid_argument("mmd2 needs non-empty sets");
  if (sigmas.empty()) throw std::invalid_argument("mmd2 needs at least one bandwidth");
  std::vector<T> inv2s2;
  for (double s : sigmas) inv2s2.push_back(static_cast<T>(1.0 / (2.0 * s * s)));
  auto kern = [&](const T* a, const T* b) {
    const T dd = detail::sqdist(a, b, d);
    T k = T(0);
    for (T c : inv2s2) k += std::exp(-dd * c);
    return k;
  };
  const T* X = xs.value().ptr();
  const T* Y = ys.value().ptr();
  std::vector<T> kxx, kyy, kxy;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) kxx.push_back(kern(X + i * d, X + j * d));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) kyy.push_back(kern(Y + i * d, Y + j * d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) kxy.push_back(kern(X + i * d, Y + j * d));
  const T nn_ = static_cast<T>(n), mm = static_cast<T>(m);
  const T value = ag::ordered_sum(kxx) / (nn_ * nn_) + ag::ordered_sum(kyy) / (mm * mm) -
                  T(2) * ag::ordered_sum(kxy) / (nn_ * mm);

  return ag::make_result<T>(Tensor<T>::scalar(value), {xs, ys}, [n, m, d, inv2s2](ag::Node<T>& self) {
    const T up = self.grad[0];
    const T* X = self.parents[0]->value.ptr();
    const T* Y = self.parents[1]->value.ptr();
    auto* gx = ag::parent_grad(self, 0);
    auto* gy = ag::parent_grad(self, 1);
    // d k(a, b) / d a = -(a - b) * sum_s k_s(a, b) / sigma_s^2
    auto dk_coef = [&](const T* a, const T* b) {
      const T dd = detail::sqdist(a, b, d);
      T c = T(0);
      for (T w : inv2s2) c += std::exp(-dd * w) * T(2) * w;
      return c;
    };
    const T nn_ = static_cast<T>(n), mm = static_cast<T>(m);
    auto accumulate_self = [&](const T* S, std::size_t cnt, T norm, Tensor<T>* g) {
      for (std::size_t i = 0; i < cnt; ++i)
        for (std::size_t j = 0; j < cnt; ++j) {
          if (i == j) continue;
          const T c = dk_coef(S + i * d, S + j * d) * T(2) / norm * up;
          for (std::size_t k = 0; k < d; ++k) (*g)[i * d + k] -= c * (S[i * d + k] - S[j * d + k]);
        }
    };
    if (gx) accumulate_self(X, n, nn_ * nn_, gx);
    if (gy) accumulate_self(Y, m, mm * mm, gy);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const T c = dk_coef(X + i * d, Y + j * d) * T(2) / (nn_ * mm) * up;
        for (std::size_t k = 0; k < d; ++k) {
          const T diff = X[i * d + k] - Y[j * d + k];
          if (gx) (*gx)[i * d + k] += c * diff;
          if (gy) (*gy)[j * d + k] -= c * diff;
        }
      }
  });
}

template <typename T>
Var<T> mmd2(const Var<T>& xs, const Var<T>& ys, const KernelSpec& kernel) {
  return mmd2(xs, ys, resolve_bandwidths(kernel, xs.value(), ys.value()));
}

// beta * L_clip + (1 - beta) * L_mmd
inline double l_align(double lc, double lm, double beta) {
  check_unit_interval(beta, "beta");
  return beta * lc + (1.0 - beta) * lm;
}

// lambda * L_recon + (1 - lambda) * L_align
inline double l_train(double lr, double la, double lambda) {
  check_unit_interval(lambda, "lambda");
  return lambda * lr + (1.0 - lambda) * la;
}

template <typename T>
Var<T> l_align(const Var<T>& lc, const Var<T>& lm, double beta) {
  check_unit_interval(beta, "beta");
  return ag::add(ag::scale(lc, static_cast<T>(beta)), ag::scale(lm, static_cast<T>(1.0 - beta)));
}

template <typename T>
Var<T> l_train(const Var<T>& lr, const Var<T>& la, double lambda) {
  check_unit_interval(lambda, "lambda");
  return ag::add(ag::scale(lr, static_cast<T>(lambda)), ag::scale(la, static_cast<T>(1.0 - lambda)));
}

}  // namespace sg2im::objectives
