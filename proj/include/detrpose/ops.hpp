#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "detrpose/tensor.hpp"

namespace detrpose {

namespace detail {

enum class Broadcast { Same, Row, Scalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.size() == 1) return Broadcast::Scalar;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.size()) return Broadcast::Row;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                       shape_str(a.shape()));
}

inline std::size_t bindex(Broadcast kind, std::size_t i, std::size_t row) {
  switch (kind) {
    case Broadcast::Same: return i;
    case Broadcast::Row: return i % row;
    default: return 0;
  }
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(x.shape(), out, {x}, [df, out](TensorNode<T>& self) {
    const auto& xd = parent_data(self, 0);
    T* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += self.grad[i] * df(xd[i], out[i]);
  });
}

}  // namespace detail

// Elementwise a + b; b may equal a's shape, be a row vector over the last
// extent, or a single value.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "add");
  std::size_t row = b.size();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[detail::bindex(kind, i, row)];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [kind, row](TensorNode<T>& self) {
    if (T* ga = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (T* gb = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gb[detail::bindex(kind, i, row)] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "sub");
  std::size_t row = b.size();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[detail::bindex(kind, i, row)];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [kind, row](TensorNode<T>& self) {
    if (T* ga = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (T* gb = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gb[detail::bindex(kind, i, row)] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto kind = detail::broadcast_kind(a, b, "mul");
  std::size_t row = b.size();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[detail::bindex(kind, i, row)];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [kind, row](TensorNode<T>& self) {
    const auto& ad = parent_data(self, 0);
    const auto& bd = parent_data(self, 1);
    if (T* ga = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        ga[i] += self.grad[i] * bd[detail::bindex(kind, i, row)];
    if (T* gb = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gb[detail::bindex(kind, i, row)] += self.grad[i] * ad[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Values outside [lo, hi] are pinned and pass no gradient.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v < lo || v > hi) ? T(0) : T(1); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return make_result<T>({1}, {acc}, {x}, [](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// Sum of a list of tensors with identical shapes, accumulated in list order.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("add_n of empty list");
  std::vector<T> out(xs[0].data().begin(), xs[0].data().end());
  for (std::size_t k = 1; k < xs.size(); ++k) {
    if (xs[k].shape() != xs[0].shape()) throw DimensionError("add_n: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += xs[k][i];
  }
  return make_result<T>(xs[0].shape(), std::move(out), xs, [](TensorNode<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (T* g = parent_grad(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(std::move(shape), std::move(out), {x}, [](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

namespace detail {

template <typename T>
void require_2d(const Tensor<T>& x, const char* op) {
  if (x.rank() != 2) throw DimensionError(std::string(op) + ": expected 2-d, got " + shape_str(x.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_2d(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result<T>({n, m}, std::move(out), {x}, [m, n](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += self.grad[j * m + i];
  });
}

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode<T>& self) {
    const auto& ad = parent_data(self, 0);
    const auto& bd = parent_data(self, 1);
    if (T* ga = parent_grad(self, 0)) detail::gemm_nt(self.grad.data(), bd.data(), ga, m, k, n);
    if (T* gb = parent_grad(self, 1)) detail::gemm_tn(ad.data(), self.grad.data(), gb, m, k, n);
  });
}

// x[m,k] * w[k,n] + bias[n]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_2d(x, "linear");
  detail::require_2d(w, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k || bias.size() != n)
    throw DimensionError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()) + " + " +
                         shape_str(bias.shape()));
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = bias[j];
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  return make_result<T>({m, n}, std::move(out), {x, w, bias}, [m, k, n](TensorNode<T>& self) {
    const auto& xd = parent_data(self, 0);
    const auto& wd = parent_data(self, 1);
    if (T* gx = parent_grad(self, 0)) detail::gemm_nt(self.grad.data(), wd.data(), gx, m, k, n);
    if (T* gw = parent_grad(self, 1)) detail::gemm_tn(xd.data(), self.grad.data(), gw, m, k, n);
    if (T* gb = parent_grad(self, 2))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
  });
}

// Row-wise normalization over the last extent with affine gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  detail::require_2d(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.size() != n || beta.size() != n) throw DimensionError("layer_norm: affine size");
  std::vector<T> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    T mu = T(0);
    for (std::size_t j = 0; j < n; ++j) mu += x[i * n + j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T d = x[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (x[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gamma[j] + beta[j];
    }
  }
  return make_result<T>(
      {m, n}, std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
        const auto& gd = parent_data(self, 1);
        const T* g = self.grad.data();
        if (T* gx = parent_grad(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            T s1 = T(0), s2 = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T dxh = g[i * n + j] * gd[j];
              s1 += dxh;
              s2 += dxh * xhat[i * n + j];
            }
            const T inv_n = T(1) / static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T dxh = g[i * n + j] * gd[j];
              gx[i * n + j] += inv_std[i] * (dxh - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
            }
          }
        }
        if (T* gg = parent_grad(self, 1))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
        if (T* gb = parent_grad(self, 2))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> rows) {
  detail::require_2d(x, "gather_rows");
  const std::size_t n = x.dim(1), m = x.dim(0);
  std::vector<T> out(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m) throw BoundsError("gather_rows: row index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const std::size_t count = rows.size();
  return make_result<T>({count, n}, std::move(out), {x}, [rows = std::move(rows), n](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) gx[rows[r] * n + j] += self.grad[r * n + j];
  });
}

// Flat-index gather producing a 1-d tensor.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::size_t> idx) {
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.size()) throw BoundsError("gather: index out of range");
    out[i] = x[idx[i]];
  }
  const std::size_t count = idx.size();
  return make_result<T>({count}, std::move(out), {x}, [idx = std::move(idx)](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("concat_rows of empty list");
  const std::size_t n = xs[0].dim(1);
  std::size_t m = 0;
  for (const auto& x : xs) {
    detail::require_2d(x, "concat_rows");
    if (x.dim(1) != n) throw DimensionError("concat_rows: column mismatch");
    m += x.dim(0);
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& x : xs) out.insert(out.end(), x.data().begin(), x.data().end());
  return make_result<T>({m, n}, std::move(out), xs, [](TensorNode<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t len = self.parents[k]->data.size();
      if (T* g = parent_grad(self, k))
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      off += len;
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_2d(x, "slice_rows");
  if (start + count > x.dim(0)) throw BoundsError("slice_rows out of range");
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), start);
  return gather_rows(x, std::move(rows));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_2d(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + count > n) throw BoundsError("slice_cols out of range");
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x[i * n + start + j];
  return make_result<T>({m, count}, std::move(out), {x}, [m, n, start, count](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + start + j] += self.grad[i * count + j];
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("concat_cols of empty list");
  const std::size_t m = xs[0].dim(0);
  std::size_t n = 0;
  for (const auto& x : xs) {
    detail::require_2d(x, "concat_cols");
    if (x.dim(0) != m) throw DimensionError("concat_cols: row mismatch");
    n += x.dim(1);
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = x[i * w + j];
    off += w;
  }
  return make_result<T>({m, n}, std::move(out), xs, [m, n](TensorNode<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t w = self.parents[k]->shape[1];
      if (T* g = parent_grad(self, k))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * n + off + j];
      off += w;
    }
  });
}

// Row-wise softmax over the last extent of a 2-d tensor.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require_2d(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    T mx = x[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(x[i * n + j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result<T>({m, n}, out, {x}, [m, n, out](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * out[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] += out[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

// Sinusoidal embedding of 2-d points: [P,2] -> [P,dim]. The first half of
// the channels encodes y, the second half x, each as interleaved sin/cos.
template <typename T>
Tensor<T> sine_embed(const Tensor<T>& points, std::size_t dim, T temperature = T(20)) {
  detail::require_2d(points, "sine_embed");
  if (points.dim(1) != 2 || dim % 4 != 0) throw DimensionError("sine_embed: expects [P,2] and dim % 4 == 0");
  const std::size_t p = points.dim(0), half = dim / 2;
  std::vector<T> freq(half / 2);
  for (std::size_t f = 0; f < freq.size(); ++f)
    freq[f] = T(2) * std::numbers::pi_v<T> *
              std::pow(temperature, -static_cast<T>(f) / static_cast<T>(freq.size()));
  std::vector<T> out(p * dim);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const T c = points[i * 2 + (1 - axis)];
      for (std::size_t f = 0; f < freq.size(); ++f) {
        out[i * dim + axis * half + 2 * f] = std::sin(c * freq[f]);
        out[i * dim + axis * half + 2 * f + 1] = std::cos(c * freq[f]);
      }
    }
  }
  return make_result<T>({p, dim}, out, {points}, [p, dim, half, freq, out](TensorNode<T>& self) {
    T* gp = parent_grad(self, 0);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t axis = 0; axis < 2; ++axis) {
        T acc = T(0);
        for (std::size_t f = 0; f < freq.size(); ++f) {
          const std::size_t s = i * dim + axis * half + 2 * f;
          acc += self.grad[s] * freq[f] * out[s + 1] - self.grad[s + 1] * freq[f] * out[s];
        }
        gp[i * 2 + (1 - axis)] += acc;
      }
  });
}

// Mean over consecutive blocks of `group` rows: [n*group, c] -> [n, c].
template <typename T>
Tensor<T> mean_groups(const Tensor<T>& x, std::size_t group) {
  detail::require_2d(x, "mean_groups");
  if (group == 0 || x.dim(0) % group != 0) throw DimensionError("mean_groups: rows not divisible by group");
  const std::size_t n = x.dim(0) / group, c = x.dim(1);
  const T inv = T(1) / static_cast<T>(group);
  std::vector<T> out(n * c, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < group; ++r)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += x[(i * group + r) * c + j];
  for (auto& v : out) v *= inv;
  return make_result<T>({n, c}, std::move(out), {x}, [n, c, group, inv](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < group; ++r)
        for (std::size_t j = 0; j < c; ++j) gx[(i * group + r) * c + j] += self.grad[i * c + j] * inv;
  });
}

}  // namespace detrpose
