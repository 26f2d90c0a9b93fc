#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "detrpose/ops.hpp"

namespace detrpose {

// Boolean blocking matrix; blocked(i, j) == true forbids query i from
// attending to key j.
struct AttnMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> blocked;

  AttnMask() = default;
  AttnMask(std::size_t r, std::size_t c) : rows(r), cols(c), blocked(r * c, 0) {}

  bool at(std::size_t i, std::size_t j) const { return blocked[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool b) { blocked[i * cols + j] = b ? 1 : 0; }

  // Throws DegenerateMaskError naming the first row with no open column.
  void validate() const {
    for (std::size_t i = 0; i < rows; ++i) {
      bool open = false;
      for (std::size_t j = 0; j < cols && !open; ++j) open = !at(i, j);
      if (!open) throw DegenerateMaskError("attention mask row " + std::to_string(i) + " is fully blocked");
    }
  }
};

namespace detail {

// Softmax over the open entries of one row; blocked entries are written as 0.
template <typename T>
void masked_softmax_row(const T* logits, const AttnMask* mask, std::size_t row, std::size_t n, T* out) {
  auto open = [&](std::size_t j) { return mask == nullptr || !mask->at(row, j); };
  T mx = T(0);
  bool any = false;
  for (std::size_t j = 0; j < n; ++j)
    if (open(j)) {
      mx = any ? std::max(mx, logits[j]) : logits[j];
      any = true;
    }
  if (!any) throw DegenerateMaskError("attention mask row " + std::to_string(row) + " is fully blocked");
  T z = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = open(j) ? std::exp(logits[j] - mx) : T(0);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

}  // namespace detail

// Softmax over the last extent with blocked positions forced to exactly 0.
// The mask covers the last two extents and is reused for leading ones.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const AttnMask& mask) {
  if (logits.rank() < 2 || logits.dim(logits.rank() - 2) != mask.rows ||
      logits.dim(logits.rank() - 1) != mask.cols)
    throw DimensionError("masked_softmax: mask " + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + " does not fit logits " + shape_str(logits.shape()));
  mask.validate();
  const std::size_t n = mask.cols, rows = logits.size() / n;
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r)
    detail::masked_softmax_row(logits.data().data() + r * n, &mask, r % mask.rows, n, out.data() + r * n);
  return make_result<T>(logits.shape(), out, {logits}, [n, rows, out](TensorNode<T>& self) {
    T* gx = parent_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* p = out.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[j] * (g[j] - dot);
    }
  });
}

// Multi-head scaled dot-product attention evaluated independently inside
// each token group. q, k, v are [T, D]; groups hold token indices into T.
// When `mask` is given it is indexed by position within a group and must
// be n x n for every group. Tokens outside all groups get zero output.
template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const std::vector<std::vector<std::size_t>>& groups, std::size_t heads,
                            const AttnMask* mask = nullptr) {
  detail::require_2d(q, "grouped_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape())
    throw DimensionError("grouped_attention: q/k/v shapes differ");
  const std::size_t tokens = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) throw DimensionError("grouped_attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  for (const auto& g : groups) {
    if (mask && (mask->rows != g.size() || mask->cols != g.size()))
      throw DimensionError("grouped_attention: mask does not match group size");
    for (auto t : g)
      if (t >= tokens) throw BoundsError("grouped_attention: token index out of range");
  }
  if (mask) mask->validate();

  // probs[group][head] is an n x n row-major block.
  std::vector<std::vector<T>> probs;
  probs.reserve(groups.size() * heads);
  std::vector<T> out(tokens * d, T(0));
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  std::vector<T> logits;
  for (const auto& g : groups) {
    const std::size_t n = g.size();
    logits.assign(n, T(0));
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<T> p(n * n, T(0));
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = qd + g[i] * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          if (mask && mask->at(i, j)) {
            logits[j] = T(0);
            continue;
          }
          const T* kj = kd + g[j] * d + h * dh;
          T s = T(0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          logits[j] = s * inv_sqrt;
        }
        detail::masked_softmax_row(logits.data(), mask, i, n, p.data() + i * n);
        T* oi = out.data() + g[i] * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          if (mask && mask->at(i, j)) continue;
          const T w = p[i * n + j];
          const T* vj = vd + g[j] * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
      probs.push_back(std::move(p));
    }
  }

  std::vector<std::vector<std::size_t>> groups_copy = groups;
  std::vector<std::uint8_t> blocked = mask ? mask->blocked : std::vector<std::uint8_t>{};
  return make_result<T>(
      {tokens, d}, std::move(out), {q, k, v},
      [groups = std::move(groups_copy), probs = std::move(probs), blocked = std::move(blocked), heads, d, dh,
       inv_sqrt](TensorNode<T>& self) {
        const T* qd = self.parents[0]->data.data();
        const T* kd = self.parents[1]->data.data();
        const T* vd = self.parents[2]->data.data();
        T* gq = parent_grad(self, 0);
        T* gk = parent_grad(self, 1);
        T* gv = parent_grad(self, 2);
        const T* go = self.grad.data();
        std::vector<T> dp;
        std::size_t block = 0;
        for (const auto& g : groups) {
          const std::size_t n = g.size();
          auto is_blocked = [&](std::size_t i, std::size_t j) {
            return !blocked.empty() && blocked[i * n + j] != 0;
          };
          for (std::size_t h = 0; h < heads; ++h, ++block) {
            const auto& p = probs[block];
            dp.assign(n, T(0));
            for (std::size_t i = 0; i < n; ++i) {
              const T* goi = go + g[i] * d + h * dh;
              T dot = T(0);
              for (std::size_t j = 0; j < n; ++j) {
                if (is_blocked(i, j)) {
                  dp[j] = T(0);
                  continue;
                }
                const T* vj = vd + g[j] * d + h * dh;
                T s = T(0);
                for (std::size_t c = 0; c < dh; ++c) s += goi[c] * vj[c];
                dp[j] = s;
                dot += s * p[i * n + j];
                if (gv) {
                  T* gvj = gv + g[j] * d + h * dh;
                  const T w = p[i * n + j];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += w * goi[c];
                }
              }
              const T* qi = qd + g[i] * d + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                if (is_blocked(i, j)) continue;
                const T ds = p[i * n + j] * (dp[j] - dot) * inv_sqrt;
                if (ds == T(0)) continue;
                const T* kj = kd + g[j] * d + h * dh;
                if (gq) {
                  T* gqi = gq + g[i] * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = gk + g[j] * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace detrpose
