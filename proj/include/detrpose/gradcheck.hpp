#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "detrpose/tensor.hpp"

namespace detrpose {

// Relative error with a floor on the denominator so that near-zero
// gradients are compared absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares the reverse-mode gradient of a scalar function with central
// differences at `input`. Both routes run in 64-bit. Returns the worst
// relative error over all input entries.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& fn,
                         const Tensor<double>& input, double eps = 1e-6, double floor = 1e-3) {
  if (!(eps > 0)) throw ArgumentError("grad_check: eps must be positive");
  Tensor<double> x(input.shape(), std::vector<double>(input.data().begin(), input.data().end()), true);
  const Tensor<double> y = fn(x);
  if (y.size() != 1) throw DimensionError("grad_check: function must be scalar-valued");
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
  y.backward();
  std::vector<double> analytic(x.size(), 0.0);
  if (!x.grad().empty()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  NoGradGuard guard;
  double worst = 0.0;
  std::vector<double> probe(input.data().begin(), input.data().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = fn(Tensor<double>(input.shape(), probe)).item();
    probe[i] = orig - eps;
    const double fm = fn(Tensor<double>(input.shape(), probe)).item();
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite function value");
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2 * eps), floor));
  }
  return worst;
}

}  // namespace detrpose
