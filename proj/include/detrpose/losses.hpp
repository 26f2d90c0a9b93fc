#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "detrpose/denoising.hpp"
#include "detrpose/geometry.hpp"
#include "detrpose/model.hpp"

namespace detrpose {

struct VfParams {
  double alpha = 0.75;
  double gamma = 2.0;

  void validate() const {
    if (!(alpha > 0.0) || alpha > 1.0) throw ArgumentError("varifocal alpha must lie in (0, 1]");
    if (!(gamma >= 0.0)) throw ArgumentError("varifocal gamma must be non-negative");
  }
};

struct LossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double oks = 2.0;
};

inline constexpr double kProbClamp = 1e-7;

// Keypoint-similarity varifocal loss for one prediction. q > 0 uses the
// q-weighted cross-entropy against target q; q == 0 uses the focal branch.
inline double ksvf_loss(double q, double c, const VfParams& params) {
  c = std::clamp(c, kProbClamp, 1.0 - kProbClamp);
  if (q > 0.0) return -q * (q * std::log(c) + (1.0 - q) * std::log(1.0 - c));
  return -params.alpha * std::pow(c, params.gamma) * std::log(1.0 - c);
}

inline double ksvf_grad(double q, double c, const VfParams& params) {
  if (c < kProbClamp || c > 1.0 - kProbClamp) return 0.0;
  if (q > 0.0) return -q * (q / c - (1.0 - q) / (1.0 - c));
  const double lg = std::log(1.0 - c);
  const double cg1 = params.gamma == 0.0 ? 0.0 : params.gamma * std::pow(c, params.gamma - 1.0);
  return -params.alpha * (cg1 * lg - std::pow(c, params.gamma) / (1.0 - c));
}

// Summed loss over predicted probabilities `probs` against targets `q`.
template <typename T>
Tensor<T> ksvf_loss(const Tensor<T>& probs, const std::vector<double>& q, const VfParams& params) {
  if (probs.size() != q.size()) throw DimensionError("ksvf_loss: target count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) acc += ksvf_loss(q[i], static_cast<double>(probs[i]), params);
  return make_result<T>({1}, {static_cast<T>(acc)}, {probs}, [q, params](TensorNode<T>& self) {
    const auto& c = parent_data(self, 0);
    T* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < q.size(); ++i)
      g[i] += self.grad[0] * static_cast<T>(ksvf_grad(q[i], static_cast<double>(c[i]), params));
  });
}

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, ground truth), by prediction
  std::vector<std::size_t> unmatched_predictions;
};

using CostMatrix = std::vector<std::vector<double>>;

namespace detail {

// Minimum-cost assignment of every row to a distinct column, rows <= cols.
// Returns the column of each row.
inline std::vector<std::size_t> hungarian_rows(const CostMatrix& a) {
  const std::size_t n = a.size(), m = n ? a[0].size() : 0;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n, 0);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) col[p[j] - 1] = j - 1;
  return col;
}

// Optimal total over a sub-matrix given by row/column index lists, matching
// min(rows, cols) pairs.
inline double optimal_total(const CostMatrix& cost, const std::vector<std::size_t>& rows,
                            const std::vector<std::size_t>& cols) {
  if (rows.empty() || cols.empty()) return 0.0;
  const bool flip = rows.size() > cols.size();
  const auto& r = flip ? cols : rows;
  const auto& c = flip ? rows : cols;
  CostMatrix sub(r.size(), std::vector<double>(c.size()));
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j) sub[i][j] = flip ? cost[c[j]][r[i]] : cost[r[i]][c[j]];
  const auto assign = hungarian_rows(sub);
  double total = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) total += sub[i][assign[i]];
  return total;
}

}  // namespace detail

// Minimum-cost matching of min(rows, cols) pairs. Among optimal
// assignments the lexicographically smallest (prediction, gt) pair list is
// returned.
inline MatchResult hungarian_match(const CostMatrix& cost) {
  MatchResult result;
  const std::size_t n = cost.size(), m = n ? cost[0].size() : 0;
  for (const auto& row : cost) {
    if (row.size() != m) throw DimensionError("hungarian_match: ragged cost matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw ArgumentError("hungarian_match: non-finite cost");
  }
  if (n == 0 || m == 0) {
    for (std::size_t i = 0; i < n; ++i) result.unmatched_predictions.push_back(i);
    return result;
  }
  std::vector<std::size_t> all_rows(n), all_cols(m);
  std::iota(all_rows.begin(), all_rows.end(), 0);
  std::iota(all_cols.begin(), all_cols.end(), 0);
  const double best = detail::optimal_total(cost, all_rows, all_cols);
  const double tol = 1e-12 * std::max(1.0, std::abs(best));
  const std::size_t want = std::min(n, m);

  std::vector<std::size_t> free_cols = all_cols;
  double fixed = 0.0;
  for (std::size_t i = 0; i < n && result.pairs.size() < want; ++i) {
    std::vector<std::size_t> later_rows;
    for (std::size_t r = i + 1; r < n; ++r) later_rows.push_back(r);
    bool placed = false;
    for (std::size_t jj = 0; jj < free_cols.size() && !placed; ++jj) {
      const std::size_t j = free_cols[jj];
      std::vector<std::size_t> rest_cols = free_cols;
      rest_cols.erase(rest_cols.begin() + static_cast<std::ptrdiff_t>(jj));
      // the remaining rows must still be able to fill the remaining pairs
      if (std::min(later_rows.size(), rest_cols.size()) < want - result.pairs.size() - 1) continue;
      const double total = fixed + cost[i][j] + detail::optimal_total(cost, later_rows, rest_cols);
      if (std::abs(total - best) <= tol) {
        result.pairs.emplace_back(i, j);
        fixed += cost[i][j];
        free_cols = std::move(rest_cols);
        placed = true;
      }
    }
  }
  std::vector<char> used(n, 0);
  for (const auto& pr : result.pairs) used[pr.first] = 1;
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) result.unmatched_predictions.push_back(i);
  return result;
}

inline double assignment_cost(const CostMatrix& cost, const MatchResult& match) {
  double total = 0.0;
  for (const auto& [i, j] : match.pairs) total += cost[i][j];
  return total;
}

// Instance view of rows [first, first + count) of a prediction's keypoints.
template <typename T>
std::vector<PersonInstance> instances_from(const Tensor<T>& keypoints, std::size_t num_keypoints, std::size_t first,
                                           std::size_t count) {
  std::vector<PersonInstance> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i].keypoints.resize(num_keypoints);
    for (std::size_t j = 0; j < num_keypoints; ++j) {
      const std::size_t r = (first + i) * num_keypoints + j;
      out[i].keypoints[j] = {static_cast<double>(keypoints[r * 2]), static_cast<double>(keypoints[r * 2 + 1]), true};
    }
  }
  return out;
}

inline double focal_class_cost(double logit, const VfParams& vf) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double pos = vf.alpha * std::pow(1.0 - p, vf.gamma) * -std::log(p + 1e-8);
  const double neg = (1.0 - vf.alpha) * std::pow(p, vf.gamma) * -std::log(1.0 - p + 1e-8);
  return pos - neg;
}

// Mean absolute coordinate error over the ground truth's visible keypoints.
inline double keypoint_l1(const PersonInstance& pred, const PersonInstance& gt) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.keypoints.size(); ++i) {
    if (!gt.keypoints[i].visible) continue;
    acc += std::abs(pred.keypoints[i].x - gt.keypoints[i].x) + std::abs(pred.keypoints[i].y - gt.keypoints[i].y);
    ++n;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

// cost(i, j) = w_cls * focal class cost + w_l1 * keypoint L1 + w_oks * (1 - OKS).
inline CostMatrix match_cost(const std::vector<PersonInstance>& preds, const std::vector<double>& refined_logits,
                             const std::vector<PersonInstance>& gts, const KsParams& ks, const VfParams& vf,
                             const LossWeights& w) {
  if (preds.size() != refined_logits.size()) throw DimensionError("match_cost: logit count mismatch");
  CostMatrix cost(preds.size(), std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double cls = focal_class_cost(refined_logits[i], vf);
    for (std::size_t j = 0; j < gts.size(); ++j)
      cost[i][j] = w.cls * cls + w.l1 * keypoint_l1(preds[i], gts[j]) + w.oks * (1.0 - instance_oks(preds[i], gts[j], ks));
  }
  return cost;
}

struct StageLoss {
  double ksvf = 0.0;
  double keypoint_l1 = 0.0;
  double oks_term = 0.0;
  double dn_ksvf = 0.0;
  double dn_keypoint_l1 = 0.0;
  double dn_oks_term = 0.0;
};

// Per-stage terms (stage 0 is query selection, then one per decoder layer)
// and the weighted total used for backpropagation.
template <typename T>
struct LossBreakdown {
  std::vector<StageLoss> stages;
  LossWeights weights;
  Tensor<T> total_tensor;

  double total() const { return static_cast<double>(total_tensor.item()); }
  double weighted_ksvf() const { return sum_of([](const StageLoss& s) { return s.ksvf + s.dn_ksvf; }) * weights.cls; }
  double weighted_keypoint_l1() const {
    return sum_of([](const StageLoss& s) { return s.keypoint_l1 + s.dn_keypoint_l1; }) * weights.l1;
  }
  double weighted_oks() const { return sum_of([](const StageLoss& s) { return s.oks_term + s.dn_oks_term; }) * weights.oks; }

 private:
  template <typename F>
  double sum_of(F f) const {
    double acc = 0.0;
    for (const auto& s : stages) acc += f(s);
    return acc;
  }
};

namespace detail {

// L1 and (1 - OKS) summed over (prediction row, gt) pairs, each instance's
// terms averaged over its visible keypoints.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> keypoint_terms(const Tensor<T>& keypoints, std::size_t k,
                                               const std::vector<std::pair<std::size_t, const PersonInstance*>>& pairs,
                                               const KsParams& ks) {
  std::vector<std::size_t> rows;
  std::vector<T> target, l1w, oks_coef, oks_w;
  for (const auto& [row, gt] : pairs) {
    const double nv = static_cast<double>(gt->num_visible());
    const double s2 = gt->area;
    for (std::size_t j = 0; j < k; ++j) {
      rows.push_back(row * k + j);
      const auto& g = gt->keypoints[j];
      target.push_back(static_cast<T>(g.x));
      target.push_back(static_cast<T>(g.y));
      const T w = g.visible && nv > 0 ? static_cast<T>(1.0 / nv) : T(0);
      l1w.push_back(w);
      l1w.push_back(w);
      oks_w.push_back(w);
      oks_coef.push_back(static_cast<T>(-1.0 / (2.0 * s2 * ks.kappa[j] * ks.kappa[j])));
    }
  }
  const std::size_t m = rows.size();
  auto pred = gather_rows(keypoints, rows);
  auto diff = sub(pred, Tensor<T>({m, 2}, std::move(target)));
  auto l1 = sum(mul(abs(diff), Tensor<T>({m, 2}, std::move(l1w))));
  auto d2 = matmul(square(diff), Tensor<T>({2, 1}, {T(1), T(1)}));
  auto kss = exp(mul(d2, Tensor<T>({m, 1}, std::move(oks_coef))));
  auto oks = sum(mul(sub(Tensor<T>::full({m, 1}, T(1)), kss), Tensor<T>({m, 1}, std::move(oks_w))));
  return {l1, oks};
}

template <typename T>
Tensor<T> logit_slice_probs(const Tensor<T>& logits, std::size_t first, std::size_t count) {
  return sigmoid(reshape(slice_rows(logits, first, count), {count}));
}

}  // namespace detail

// Matching and quality targets of one stage. The targets are constants of
// the loss; passing them back in reproduces the same assignment.
struct StageTargets {
  MatchResult match;
  std::vector<double> q;
};

struct LossConfig {
  KsParams ks;
  VfParams vf;
  LossWeights weights;
};

// Sums matching and denoising terms over all stages. Matching instances
// are assigned by Hungarian matching on refined logits; denoising instances
// keep their source ground truth. gts are normalized.
template <typename T>
LossBreakdown<T> total_loss(const std::vector<LayerPrediction<T>>& stages, const DnLayout& layout,
                            const std::vector<NoisySample>& dn_samples, const std::vector<PersonInstance>& gts,
                            const LossConfig& cfg, std::vector<StageTargets>* targets = nullptr) {
  const bool reuse = targets && !targets->empty();
  if (reuse && targets->size() != stages.size()) throw DimensionError("total_loss: stored targets do not match stages");
  if (targets && !reuse) targets->resize(stages.size());
  LossBreakdown<T> out;
  out.weights = cfg.weights;
  const double norm = static_cast<double>(std::max<std::size_t>(1, gts.size()));
  std::vector<Tensor<T>> terms;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& st = stages[si];
    StageLoss sl;
    const std::size_t k = st.num_keypoints, nd = st.num_dn, n = st.num_instances() - nd;
    if (nd != 0 && nd != layout.total_dn_queries()) throw DimensionError("total_loss: denoising count mismatch");
    for (const auto* t : {&st.keypoints, &st.refined_logits})
      for (T v : t->data())
        if (!std::isfinite(static_cast<double>(v)))
          throw NumericError("total_loss: non-finite prediction in stage " + std::to_string(si));

    // matching queries
    StageTargets tg;
    if (reuse) {
      tg = (*targets)[si];
    } else {
      tg.q.assign(n, 0.0);
      if (!gts.empty()) {
        auto preds = instances_from(st.keypoints, k, nd, n);
        std::vector<double> logits(n);
        for (std::size_t i = 0; i < n; ++i) logits[i] = static_cast<double>(st.refined_logits[nd + i]);
        tg.match = hungarian_match(match_cost(preds, logits, gts, cfg.ks, cfg.vf, cfg.weights));
        for (const auto& [i, j] : tg.match.pairs) tg.q[i] = instance_oks(preds[i], gts[j], cfg.ks);
      } else {
        for (std::size_t i = 0; i < n; ++i) tg.match.unmatched_predictions.push_back(i);
      }
      if (targets) (*targets)[si] = tg;
    }
    const auto& q = tg.q;
    std::vector<std::pair<std::size_t, const PersonInstance*>> matched;
    for (const auto& [i, j] : tg.match.pairs) matched.emplace_back(nd + i, &gts.at(j));
    auto ksvf = scale(ksvf_loss(detail::logit_slice_probs(st.refined_logits, nd, n), q, cfg.vf), static_cast<T>(1.0 / norm));
    sl.ksvf = ksvf.item();
    terms.push_back(scale(ksvf, static_cast<T>(cfg.weights.cls)));
    if (!matched.empty()) {
      auto [l1, oks] = detail::keypoint_terms(st.keypoints, k, matched, cfg.ks);
      l1 = scale(l1, static_cast<T>(1.0 / norm));
      oks = scale(oks, static_cast<T>(1.0 / norm));
      sl.keypoint_l1 = l1.item();
      sl.oks_term = oks.item();
      terms.push_back(scale(l1, static_cast<T>(cfg.weights.l1)));
      terms.push_back(scale(oks, static_cast<T>(cfg.weights.oks)));
    }

    // denoising queries: positives target their recorded similarity,
    // negatives target 0
    if (nd > 0) {
      std::vector<double> dq(nd, 0.0);
      std::vector<std::pair<std::size_t, const PersonInstance*>> pos;
      for (std::size_t i = 0; i < nd; ++i) {
        if (layout.polarity_of(i) != Polarity::Positive) continue;
        const auto& gt = gts.at(layout.gt_of(i));
        dq[i] = dn_samples[i].target_quality(gt);
        pos.emplace_back(i, &gt);
      }
      const double dn_norm = static_cast<double>(std::max<std::size_t>(1, pos.size()));
      auto dk = scale(ksvf_loss(detail::logit_slice_probs(st.refined_logits, 0, nd), dq, cfg.vf), static_cast<T>(1.0 / dn_norm));
      auto [l1, oks] = detail::keypoint_terms(st.keypoints, k, pos, cfg.ks);
      l1 = scale(l1, static_cast<T>(1.0 / dn_norm));
      oks = scale(oks, static_cast<T>(1.0 / dn_norm));
      sl.dn_ksvf = dk.item();
      sl.dn_keypoint_l1 = l1.item();
      sl.dn_oks_term = oks.item();
      terms.push_back(scale(dk, static_cast<T>(cfg.weights.cls)));
      terms.push_back(scale(l1, static_cast<T>(cfg.weights.l1)));
      terms.push_back(scale(oks, static_cast<T>(cfg.weights.oks)));
    }
    out.stages.push_back(sl);
  }
  out.total_tensor = terms.empty() ? Tensor<T>::scalar(T(0)) : add_n(terms);
  return out;
}

}  // namespace detrpose
