#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "detrpose/ops.hpp"

namespace detrpose {

template <typename T>
struct TopK {
  Tensor<T> values;
  std::vector<std::size_t> indices;
};

namespace detail {

// Indices of the k largest entries of [first, first + n), descending, ties
// toward the smaller index.
template <typename T>
std::vector<std::size_t> topk_indices(const T* first, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto before = [first](std::size_t a, std::size_t b) {
    return first[a] > first[b] || (first[a] == first[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

}  // namespace detail

// The k largest values of a flat tensor in descending order with their
// original indices. Gradient flows to the selected entries.
template <typename T>
TopK<T> topk(const Tensor<T>& values, std::size_t k) {
  if (k > values.size())
    throw BoundsError("topk: k=" + std::to_string(k) + " exceeds length " + std::to_string(values.size()));
  auto idx = detail::topk_indices(values.data().data(), values.size(), k);
  return {gather(values, idx), idx};
}

// Per-row top-k of a 2-d tensor: [m, n] -> [m, k].
template <typename T>
TopK<T> topk_rows(const Tensor<T>& x, std::size_t k) {
  detail::require_2d(x, "topk_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (k > n) throw BoundsError("topk_rows: k=" + std::to_string(k) + " exceeds row length " + std::to_string(n));
  std::vector<std::size_t> flat;
  flat.reserve(m * k);
  for (std::size_t i = 0; i < m; ++i)
    for (auto j : detail::topk_indices(x.data().data() + i * n, n, k)) flat.push_back(i * n + j);
  std::vector<std::size_t> cols(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) cols[i] = flat[i] % n;
  return {reshape(gather(x, std::move(flat)), {m, k}), std::move(cols)};
}

}  // namespace detrpose
