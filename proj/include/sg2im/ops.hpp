#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "sg2im/autograd.hpp"

// Differentiable operations over ag::Var. Row-major layouts throughout:
// matrices are [rows, cols], images are [batch, channels, height, width],
// token sequences are [batch, length, width].
namespace sg2im::ag {

// Sum whose result depends only on the multiset of addends.
template <typename T>
T ordered_sum(std::vector<T>& vals) {
  std::sort(vals.begin(), vals.end());
  T s = T(0);
  for (T v : vals) s += v;
  return s;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = parent_grad(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

// Elementwise product with a constant tensor (dropout masks, fixed weights).
template <typename T>
Var<T> mul_const(const Var<T>& a, const Tensor<T>& c) {
  require_same_shape(a.shape(), c.shape, "mul_const");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return make_result<T>(std::move(out), {a}, [c](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += s;
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

namespace detail {
// f computes y from x; df computes dy/dx from (x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = f(v);
  return make_result<T>(std::move(out), {a}, [df](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      const auto& x = self.parents[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * df(x[i], self.value[i]);
    }
  });
}
}  // namespace detail

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return detail::unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// Gradient flows only where the input lies strictly inside [lo, hi].
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return detail::unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().data) s += v;
  return make_result<T>(Tensor<T>::scalar(s), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (auto& v : g->data) v += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.size());
  return scale(sum(a), T(1) / n);
}

// ---------------------------------------------------------------- shape

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  if (shape_numel(s) != a.size()) throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
  Tensor<T> out(std::move(s), a.value().data);
  return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

namespace detail {
struct AxisSplit {
  std::size_t outer, axis, inner;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace detail

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Shape out_shape = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d)
      if (d != axis && p.shape()[d] != out_shape[d])
        throw ShapeError("concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(out_shape));
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  auto os = detail::split_at(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    auto ps = detail::split_at(p.shape(), axis);
    for (std::size_t o = 0; o < ps.outer; ++o)
      std::copy_n(p.value().ptr() + o * ps.axis * ps.inner, ps.axis * ps.inner,
                  out.ptr() + (o * os.axis + off) * os.inner);
    offsets.push_back(off);
    off += ps.axis;
  }
  return make_result<T>(std::move(out), parts, [axis, offsets](Node<T>& self) {
    auto os = detail::split_at(self.value.shape, axis);
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto* g = parent_grad(self, k);
      if (!g) continue;
      auto ps = detail::split_at(g->shape, axis);
      for (std::size_t o = 0; o < ps.outer; ++o) {
        const T* src = self.grad.ptr() + (o * os.axis + offsets[k]) * os.inner;
        T* dst = g->ptr() + o * ps.axis * ps.inner;
        for (std::size_t i = 0; i < ps.axis * ps.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (start + len > a.shape().at(axis)) throw ShapeError("slice out of range on " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  Tensor<T> out(out_shape);
  auto as = detail::split_at(a.shape(), axis);
  for (std::size_t o = 0; o < as.outer; ++o)
    std::copy_n(a.value().ptr() + (o * as.axis + start) * as.inner, len * as.inner,
                out.ptr() + o * len * as.inner);
  return make_result<T>(std::move(out), {a}, [axis, start, len](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    auto as = detail::split_at(g->shape, axis);
    for (std::size_t o = 0; o < as.outer; ++o) {
      const T* src = self.grad.ptr() + o * len * as.inner;
      T* dst = g->ptr() + (o * as.axis + start) * as.inner;
      for (std::size_t i = 0; i < len * as.inner; ++i) dst[i] += src[i];
    }
  });
}

// [B, M, N] -> [B, N, M]
template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
  if (a.shape().size() != 3) throw ShapeError("transpose_last2 needs rank 3");
  const std::size_t B = a.dim(0), M = a.dim(1), N = a.dim(2);
  Tensor<T> out(Shape{B, N, M});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) out[(b * N + j) * M + i] = a.value()[(b * M + i) * N + j];
  return make_result<T>(std::move(out), {a}, [B, M, N](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < N; ++j) (*g)[(b * M + i) * N + j] += self.grad[(b * N + j) * M + i];
  });
}

// ---------------------------------------------------------------- linear algebra

namespace detail {
// C[M,N] += A[M,K] * B[K,N]. Each output element accumulates over k in
// ascending order regardless of its row, so a row's result does not depend
// on which other rows share the call.
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}
// C[M,K] += A[M,N] * B[K,N]^T
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t M, std::size_t N, std::size_t K) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      T s = T(0);
      const T* a = A + i * N;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) s += a[j] * b[j];
      C[i * K + k] += s;
    }
}
// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[i * K + k];
      const T* b = B + i * N;
      T* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
}
}  // namespace detail

// [M,K] x [K,N] -> [M,N]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out(Shape{M, N});
  detail::gemm_nn(a.value().ptr(), b.value().ptr(), out.ptr(), M, K, N);
  return make_result<T>(std::move(out), {a, b}, [M, K, N](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = parent_grad(self, 0)) detail::gemm_nt(self.grad.ptr(), bv.ptr(), g->ptr(), M, N, K);
    if (auto* g = parent_grad(self, 1)) detail::gemm_tn(av.ptr(), self.grad.ptr(), g->ptr(), M, K, N);
  });
}

// x[d0, C, rest...] + b[C]
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  if (x.shape().size() < 2 || b.size() != x.dim(1))
    throw ShapeError("add_bias " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  auto s = detail::split_at(x.shape(), 1);
  Tensor<T> out = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.axis; ++c) {
      T* p = out.ptr() + (o * s.axis + c) * s.inner;
      const T bv = b.value()[c];
      for (std::size_t i = 0; i < s.inner; ++i) p[i] += bv;
    }
  return make_result<T>(std::move(out), {x, b}, [s](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.axis; ++c) {
          const T* p = self.grad.ptr() + (o * s.axis + c) * s.inner;
          T acc = T(0);
          for (std::size_t i = 0; i < s.inner; ++i) acc += p[i];
          (*g)[c] += acc;
        }
  });
}

// x[B, C, rest...] + e[B, C]
template <typename T>
Var<T> add_per_channel(const Var<T>& x, const Var<T>& e) {
  if (x.shape().size() < 2 || e.shape() != Shape{x.dim(0), x.dim(1)})
    throw ShapeError("add_per_channel " + shape_str(x.shape()) + " + " + shape_str(e.shape()));
  auto s = detail::split_at(x.shape(), 1);
  Tensor<T> out = x.value();
  for (std::size_t bc = 0; bc < s.outer * s.axis; ++bc) {
    T* p = out.ptr() + bc * s.inner;
    for (std::size_t i = 0; i < s.inner; ++i) p[i] += e.value()[bc];
  }
  return make_result<T>(std::move(out), {x, e}, [s](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t bc = 0; bc < s.outer * s.axis; ++bc) {
        const T* p = self.grad.ptr() + bc * s.inner;
        T acc = T(0);
        for (std::size_t i = 0; i < s.inner; ++i) acc += p[i];
        (*g)[bc] += acc;
      }
  });
}

// ---------------------------------------------------------------- graph ops

// table[V, D] rows picked by ids -> [n, D]
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<std::size_t>& ids) {
  if (table.shape().size() != 2) throw ShapeError("gather_rows needs a matrix");
  const std::size_t V = table.dim(0), D = table.dim(1);
  Tensor<T> out(Shape{ids.size(), D});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= V)
      throw std::out_of_range("row id " + std::to_string(ids[r]) + " outside table of " + std::to_string(V));
    std::copy_n(table.value().ptr() + ids[r] * D, D, out.ptr() + r * D);
  }
  return make_result<T>(std::move(out), {table}, [ids, D](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t d = 0; d < D; ++d) (*g)[ids[r] * D + d] += self.grad[r * D + d];
  });
}

// out[s] = mean of rows x[i] with segment[i] == s; empty segments give zeros.
// The per-column sums are order independent, so permuting the rows of x
// together with their segment ids leaves the result bitwise unchanged.
template <typename T>
Var<T> segment_mean(const Var<T>& x, const std::vector<std::size_t>& segment, std::size_t num_segments) {
  if (x.shape().size() != 2 || x.dim(0) != segment.size())
    throw ShapeError("segment_mean rows do not match segment ids");
  const std::size_t D = x.dim(1);
  std::vector<std::vector<std::size_t>> members(num_segments);
  for (std::size_t i = 0; i < segment.size(); ++i) {
    if (segment[i] >= num_segments) throw std::out_of_range("segment id out of range");
    members[segment[i]].push_back(i);
  }
  Tensor<T> out(Shape{num_segments, D});
  std::vector<T> buf;
  for (std::size_t s = 0; s < num_segments; ++s) {
    if (members[s].empty()) continue;
    for (std::size_t d = 0; d < D; ++d) {
      buf.clear();
      for (auto i : members[s]) buf.push_back(x.value()[i * D + d]);
      out[s * D + d] = ordered_sum(buf) / static_cast<T>(members[s].size());
    }
  }
  return make_result<T>(std::move(out), {x}, [members, D](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t s = 0; s < members.size(); ++s) {
        const T inv = T(1) / static_cast<T>(std::max<std::size_t>(members[s].size(), 1));
        for (auto i : members[s])
          for (std::size_t d = 0; d < D; ++d) (*g)[i * D + d] += self.grad[s * D + d] * inv;
      }
  });
}

// [n, D] -> [1, D], order independent.
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
  return segment_mean(x, std::vector<std::size_t>(x.dim(0), 0), 1);
}

// Row i taken from b where take_b[i], else from a.
template <typename T>
Var<T> select_rows(const Var<T>& a, const Var<T>& b, const std::vector<bool>& take_b) {
  require_same_shape(a.shape(), b.shape(), "select_rows");
  const std::size_t D = a.dim(1);
  Tensor<T> out = a.value();
  for (std::size_t r = 0; r < take_b.size(); ++r)
    if (take_b[r]) std::copy_n(b.value().ptr() + r * D, D, out.ptr() + r * D);
  return make_result<T>(std::move(out), {a, b}, [take_b, D](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto* g = parent_grad(self, k);
      if (!g) continue;
      for (std::size_t r = 0; r < take_b.size(); ++r)
        if (take_b[r] == (k == 1))
          for (std::size_t d = 0; d < D; ++d) (*g)[r * D + d] += self.grad[r * D + d];
    }
  });
}

// ---------------------------------------------------------------- convolution

namespace detail {
struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t L = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * L;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            row[oy * g.wo + ox] = (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w))
                                      ? x[(c * g.h + iy) * g.w + ix]
                                      : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* dx) {
  const std::size_t L = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * L;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
}  // namespace detail

// x[B, Cin, H, W], w[Cout, Cin, k, k], b[Cout] -> [B, Cout, Ho, Wo]
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
  if (x.shape().size() != 4 || w.shape().size() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3) ||
      b.size() != w.dim(0))
    throw ShapeError("conv2d " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), cout = w.dim(0);
  detail::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  const std::size_t L = g.ho * g.wo, KK = g.cin * g.k * g.k;

  Tensor<T> out(Shape{B, cout, g.ho, g.wo});
  std::vector<T> cols(KK * L);
  Eigen::Map<const detail::RowMat<T>> W(w.value().ptr(), cout, KK);
  for (std::size_t n = 0; n < B; ++n) {
    detail::im2col(x.value().ptr() + n * g.cin * g.h * g.w, g, cols.data());
    Eigen::Map<const detail::RowMat<T>> C(cols.data(), KK, L);
    Eigen::Map<detail::RowMat<T>> O(out.ptr() + n * cout * L, cout, L);
    O.noalias() = W * C;
    for (std::size_t c = 0; c < cout; ++c) O.row(c).array() += b.value()[c];
  }
  return make_result<T>(std::move(out), {x, w, b}, [g, B, cout, L, KK](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    auto* gx = parent_grad(self, 0);
    auto* gw = parent_grad(self, 1);
    auto* gb = parent_grad(self, 2);
    std::vector<T> cols(KK * L);
    Eigen::Map<const detail::RowMat<T>> W(wv.ptr(), cout, KK);
    for (std::size_t n = 0; n < B; ++n) {
      Eigen::Map<const detail::RowMat<T>> dO(self.grad.ptr() + n * cout * L, cout, L);
      if (gb)
        for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += dO.row(c).sum();
      if (gw) {
        detail::im2col(xv.ptr() + n * g.cin * g.h * g.w, g, cols.data());
        Eigen::Map<const detail::RowMat<T>> C(cols.data(), KK, L);
        Eigen::Map<detail::RowMat<T>> dW(gw->ptr(), cout, KK);
        dW.noalias() += dO * C.transpose();
      }
      if (gx) {
        Eigen::Map<detail::RowMat<T>> dC(cols.data(), KK, L);
        dC.noalias() = W.transpose() * dO;
        detail::col2im(cols.data(), g, gx->ptr() + n * g.cin * g.h * g.w);
      }
    }
  });
}

// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out(Shape{B, C, 2 * H, 2 * W});
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx)
        out[(p * 2 * H + y) * 2 * W + xx] = x.value()[(p * H + y / 2) * W + xx / 2];
  return make_result<T>(std::move(out), {x}, [B, C, H, W](Node<T>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t p = 0; p < B * C; ++p)
        for (std::size_t y = 0; y < 2 * H; ++y)
          for (std::size_t xx = 0; xx < 2 * W; ++xx)
            (*g)[(p * H + y / 2) * W + xx / 2] += self.grad[(p * 2 * H + y) * 2 * W + xx];
  });
}

// ---------------------------------------------------------------- normalization

namespace detail {
// Normalizes x over index sets, then applies per-channel affine. `groups`
// lists the flat indices of each normalization group; channel_of maps a flat
// index to its affine channel.
template <typename T>
Var<T> normalize_groups(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                        std::vector<std::vector<std::size_t>> groups, std::vector<std::size_t> channel_of, T eps,
                        std::vector<T>* means_out = nullptr, std::vector<T>* vars_out = nullptr) {
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& idx = groups[gi];
    const T n = static_cast<T>(idx.size());
    T mu = T(0);
    for (auto i : idx) mu += x.value()[i];
    mu /= n;
    T var = T(0);
    for (auto i : idx) {
      T d = x.value()[i] - mu;
      var += d * d;
    }
    var /= n;
    inv_std[gi] = T(1) / std::sqrt(var + eps);
    for (auto i : idx) xhat[i] = (x.value()[i] - mu) * inv_std[gi];
    if (means_out) means_out->push_back(mu);
    if (vars_out) vars_out->push_back(var);
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xhat[i] * gamma.value()[channel_of[i]] + beta.value()[channel_of[i]];
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [groups = std::move(groups), channel_of = std::move(channel_of), xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gam = self.parents[1]->value;
        if (auto* g = parent_grad(self, 1))
          for (std::size_t i = 0; i < xhat.size(); ++i) (*g)[channel_of[i]] += self.grad[i] * xhat[i];
        if (auto* g = parent_grad(self, 2))
          for (std::size_t i = 0; i < xhat.size(); ++i) (*g)[channel_of[i]] += self.grad[i];
        if (auto* g = parent_grad(self, 0))
          for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            const auto& idx = groups[gi];
            const T n = static_cast<T>(idx.size());
            T s1 = T(0), s2 = T(0);
            for (auto i : idx) {
              T dxh = self.grad[i] * gam[channel_of[i]];
              s1 += dxh;
              s2 += dxh * xhat[i];
            }
            for (auto i : idx) {
              T dxh = self.grad[i] * gam[channel_of[i]];
              (*g)[i] += inv_std[gi] / n * (n * dxh - s1 - xhat[i] * s2);
            }
          }
      });
}
}  // namespace detail

// x[B, C, H, W]; gamma, beta [C]. Each (batch, group) block is contiguous.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t num_groups, T eps = T(1e-5)) {
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t HW = x.size() / (B * C);
  if (C % num_groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const std::size_t cpg = C / num_groups, blk = cpg * HW;
  Tensor<T> xhat(x.shape()), out(x.shape());
  std::vector<T> inv_std(B * num_groups);
  for (std::size_t gi = 0; gi < B * num_groups; ++gi) {
    const T* px = x.value().ptr() + gi * blk;
    T mu = T(0);
    for (std::size_t i = 0; i < blk; ++i) mu += px[i];
    mu /= static_cast<T>(blk);
    T var = T(0);
    for (std::size_t i = 0; i < blk; ++i) var += (px[i] - mu) * (px[i] - mu);
    var /= static_cast<T>(blk);
    inv_std[gi] = T(1) / std::sqrt(var + eps);
    const std::size_t c0 = (gi % num_groups) * cpg;
    for (std::size_t c = 0; c < cpg; ++c) {
      const T ga = gamma.value()[c0 + c], be = beta.value()[c0 + c];
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t f = gi * blk + c * HW + i;
        xhat[f] = (px[c * HW + i] - mu) * inv_std[gi];
        out[f] = xhat[f] * ga + be;
      }
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [B, num_groups, cpg, HW, blk, xhat = std::move(xhat), inv_std](Node<T>& self) {
    const auto& gam = self.parents[1]->value;
    auto* gx = parent_grad(self, 0);
    auto* gg = parent_grad(self, 1);
    auto* gb = parent_grad(self, 2);
    const T n = static_cast<T>(blk);
    for (std::size_t gi = 0; gi < B * num_groups; ++gi) {
      const std::size_t c0 = (gi % num_groups) * cpg;
      T s1 = T(0), s2 = T(0);
      for (std::size_t c = 0; c < cpg; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t f = gi * blk + c * HW + i;
          const T dy = self.grad[f];
          if (gg) (*gg)[c0 + c] += dy * xhat[f];
          if (gb) (*gb)[c0 + c] += dy;
          const T dxh = dy * gam[c0 + c];
          s1 += dxh;
          s2 += dxh * xhat[f];
        }
      if (!gx) continue;
      for (std::size_t c = 0; c < cpg; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t f = gi * blk + c * HW + i;
          const T dxh = self.grad[f] * gam[c0 + c];
          (*gx)[f] += inv_std[gi] / n * (n * dxh - s1 - xhat[f] * s2);
        }
    }
  });
}

// Batch statistics over rows of x[N, D]. Batch mean and biased variance are
// written to the out-params for running-average tracking.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::vector<T>& batch_mean,
                        std::vector<T>& batch_var, T eps = T(1e-5)) {
  const std::size_t N = x.dim(0), D = x.dim(1);
  std::vector<std::vector<std::size_t>> groups(D);
  std::vector<std::size_t> channel_of(x.size());
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t n = 0; n < N; ++n) {
      groups[d].push_back(n * D + d);
      channel_of[n * D + d] = d;
    }
  batch_mean.clear();
  batch_var.clear();
  return detail::normalize_groups(x, gamma, beta, std::move(groups), std::move(channel_of), eps, &batch_mean,
                                  &batch_var);
}

// Fixed statistics (running averages).
template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const std::vector<T>& mean_,
                       const std::vector<T>& var_, T eps = T(1e-5)) {
  const std::size_t N = x.dim(0), D = x.dim(1);
  std::vector<T> inv(D);
  for (std::size_t d = 0; d < D; ++d) inv[d] = T(1) / std::sqrt(var_[d] + eps);
  Tensor<T> xhat(x.shape()), out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) {
      const std::size_t i = n * D + d;
      xhat[i] = (x.value()[i] - mean_[d]) * inv[d];
      out[i] = xhat[i] * gamma.value()[d] + beta.value()[d];
    }
  return make_result<T>(std::move(out), {x, gamma, beta}, [N, D, inv, xhat](Node<T>& self) {
    const auto& gam = self.parents[1]->value;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t i = n * D + d;
        if (auto* g = parent_grad(self, 0)) (*g)[i] += self.grad[i] * gam[d] * inv[d];
        if (auto* g = parent_grad(self, 1)) (*g)[d] += self.grad[i] * xhat[i];
        if (auto* g = parent_grad(self, 2)) (*g)[d] += self.grad[i];
      }
  });
}

// ---------------------------------------------------------------- attention

// Scaled dot-product attention. q[B, Lq, d], k[B, Lk, d], v[B, Lk, dv];
// key_mask has B*Lk entries (empty = all keys valid). Masked keys receive
// exactly zero weight; a query row with no valid key yields zeros.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const std::vector<std::uint8_t>& key_mask) {
  const std::size_t B = q.dim(0), Lq = q.dim(1), d = q.dim(2), Lk = k.dim(1), dv = v.dim(2);
  if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != d || v.dim(1) != Lk)
    throw ShapeError("attention shapes q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" +
                     shape_str(v.shape()));
  if (!key_mask.empty() && key_mask.size() != B * Lk) throw ShapeError("attention mask size mismatch");
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  Tensor<T> probs(Shape{B, Lq, Lk});
  Tensor<T> out(Shape{B, Lq, dv});
  using M = detail::RowMat<T>;
  for (std::size_t b = 0; b < B; ++b) {
    Eigen::Map<const M> Q(q.value().ptr() + b * Lq * d, Lq, d);
    Eigen::Map<const M> K(k.value().ptr() + b * Lk * d, Lk, d);
    Eigen::Map<const M> V(v.value().ptr() + b * Lk * dv, Lk, dv);
    Eigen::Map<M> P(probs.ptr() + b * Lq * Lk, Lq, Lk);
    P.noalias() = (Q * K.transpose()) * sc;
    for (std::size_t i = 0; i < Lq; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < Lk; ++j)
        if (key_mask.empty() || key_mask[b * Lk + j]) mx = std::max(mx, P(i, j));
      T z = T(0);
      for (std::size_t j = 0; j < Lk; ++j) {
        const bool valid = key_mask.empty() || key_mask[b * Lk + j];
        P(i, j) = valid ? std::exp(P(i, j) - mx) : T(0);
        z += P(i, j);
      }
      if (z > T(0)) P.row(i) /= z;
    }
    Eigen::Map<M> O(out.ptr() + b * Lq * dv, Lq, dv);
    O.noalias() = P * V;
  }
  return make_result<T>(std::move(out), {q, k, v}, [B, Lq, Lk, d, dv, sc, probs](Node<T>& self) {
    using M = detail::RowMat<T>;
    auto* gq = parent_grad(self, 0);
    auto* gk = parent_grad(self, 1);
    auto* gv = parent_grad(self, 2);
    M dP(Lq, Lk), dS(Lq, Lk);
    for (std::size_t b = 0; b < B; ++b) {
      Eigen::Map<const M> Q(self.parents[0]->value.ptr() + b * Lq * d, Lq, d);
      Eigen::Map<const M> K(self.parents[1]->value.ptr() + b * Lk * d, Lk, d);
      Eigen::Map<const M> V(self.parents[2]->value.ptr() + b * Lk * dv, Lk, dv);
      Eigen::Map<const M> P(probs.ptr() + b * Lq * Lk, Lq, Lk);
      Eigen::Map<const M> dO(self.grad.ptr() + b * Lq * dv, Lq, dv);
      if (gv) {
        Eigen::Map<M> dV(gv->ptr() + b * Lk * dv, Lk, dv);
        dV.noalias() += P.transpose() * dO;
      }
      if (!gq && !gk) continue;
      dP.noalias() = dO * V.transpose();
      for (std::size_t i = 0; i < Lq; ++i) {
        const T dot = (dP.row(i).array() * P.row(i).array()).sum();
        dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
      }
      if (gq) {
        Eigen::Map<M> dQ(gq->ptr() + b * Lq * d, Lq, d);
        dQ.noalias() += (dS * K) * sc;
      }
      if (gk) {
        Eigen::Map<M> dK(gk->ptr() + b * Lk * d, Lk, d);
        dK.noalias() += (dS.transpose() * Q) * sc;
      }
    }
  });
}

// Each row of x[N, D] scaled to unit Euclidean norm.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  if (x.shape().size() != 2) throw ShapeError("l2_normalize_rows needs a matrix");
  const std::size_t N = x.dim(0), D = x.dim(1);
  Tensor<T> out(x.shape());
  std::vector<T> norms(N);
  for (std::size_t n = 0; n < N; ++n) {
    T s = T(0);
    for (std::size_t d = 0; d < D; ++d) s += x.value()[n * D + d] * x.value()[n * D + d];
    norms[n] = std::sqrt(s + eps);
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] = x.value()[n * D + d] / norms[n];
  }
  return make_result<T>(out, {x}, [N, D, norms, out](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t n = 0; n < N; ++n) {
      T dot = T(0);
      for (std::size_t d = 0; d < D; ++d) dot += out[n * D + d] * self.grad[n * D + d];
      for (std::size_t d = 0; d < D; ++d)
        (*g)[n * D + d] += (self.grad[n * D + d] - out[n * D + d] * dot) / norms[n];
    }
  });
}

// ---------------------------------------------------------------- losses

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  return mean(square(sub(a, b)));
}

}  // namespace sg2im::ag
