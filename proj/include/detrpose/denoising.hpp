#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "detrpose/attention.hpp"
#include "detrpose/geometry.hpp"
#include "detrpose/random.hpp"

namespace detrpose {

enum class Polarity { Positive, Negative };

inline const char* to_string(Polarity p) { return p == Polarity::Positive ? "positive" : "negative"; }

// Half-open similarity bands for pose noise.
inline constexpr double kPositiveKsLo = 0.5;
inline constexpr double kPositiveKsHi = 1.0;
inline constexpr double kNegativeKsLo = 0.1;
inline constexpr double kNegativeKsHi = 0.5;
inline constexpr double kDefaultLambdaBox = 0.5;

struct NoisySample {
  PersonInstance instance;  // perturbed, normalized coordinates
  Polarity polarity = Polarity::Positive;
  std::vector<double> sampled_ks;               // pose noise, one per keypoint
  std::vector<bool> clamped;                    // pose noise hit the image border
  std::vector<std::array<double, 2>> alphas;    // box noise, (alpha1, alpha2) per corner
  std::size_t source_gt = 0;

  // Mean recorded similarity over the source's visible keypoints.
  double target_quality(const PersonInstance& gt) const {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < sampled_ks.size(); ++i)
      if (gt.keypoints[i].visible) {
        acc += sampled_ks[i];
        ++n;
      }
    return n ? acc / static_cast<double>(n) : 0.0;
  }
};

// Displacement magnitude whose keypoint similarity equals ks:
// s * kappa * sqrt(-2 ln ks).
inline double alpha_from_ks(double ks, double s, double kappa) {
  if (!(ks > 0.0) || ks > 1.0) throw ArgumentError("alpha_from_ks: ks must lie in (0, 1]");
  if (!(s > 0.0) || !(kappa > 0.0)) throw ArgumentError("alpha_from_ks: scale and kappa must be positive");
  return s * kappa * std::sqrt(-2.0 * std::log(ks));
}

// Unit vector with a uniformly distributed angle.
template <typename R>
std::array<double, 2> random_unit_vector(R& rng) {
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return {std::cos(theta), std::sin(theta)};
}

// Moves every keypoint of `gt` (normalized) by alpha * n, with alpha drawn
// from the polarity's similarity band. R needs uniform(lo, hi).
template <typename R>
NoisySample gen_pose_queries(const PersonInstance& gt, Polarity polarity, const KsParams& params, R& rng) {
  if (gt.num_visible() == 0) throw DegenerateInstanceError("gen_pose_queries: no visible keypoint");
  if (params.kappa.size() != gt.keypoints.size()) throw ArgumentError("gen_pose_queries: kappa size mismatch");
  if (!(gt.area > 0.0)) throw DegenerateInstanceError("gen_pose_queries: ground-truth area is zero");
  const double s = std::sqrt(gt.area);
  const bool pos = polarity == Polarity::Positive;
  NoisySample out;
  out.polarity = polarity;
  out.instance = gt;
  for (std::size_t i = 0; i < gt.keypoints.size(); ++i) {
    const double ks = pos ? rng.uniform(kPositiveKsLo, kPositiveKsHi) : rng.uniform(kNegativeKsLo, kNegativeKsHi);
    const double alpha = alpha_from_ks(ks, s, params.kappa[i]);
    const auto n = random_unit_vector(rng);
    auto& k = out.instance.keypoints[i];
    const double x = k.x + alpha * n[0], y = k.y + alpha * n[1];
    k.x = std::clamp(x, 0.0, 1.0);
    k.y = std::clamp(y, 0.0, 1.0);
    out.sampled_ks.push_back(ks);
    out.clamped.push_back(k.x != x || k.y != y);
  }
  return out;
}

// Shifts both corners of a box by (alpha2 * w, alpha1 * h) with alphas from
// the polarity's band, then re-sorts the corners.
template <typename R>
NoisySample gen_box_queries(const Box& gt_box, Polarity polarity, double lambda_box, R& rng) {
  if (!(lambda_box > 0.0)) throw ArgumentError("gen_box_queries: lambda_box must be positive");
  if (!(gt_box.width() > 0.0) || !(gt_box.height() > 0.0))
    throw DegenerateInstanceError("gen_box_queries: ground-truth box has zero area");
  auto draw = [&]() {
    if (polarity == Polarity::Positive) return rng.uniform(-lambda_box, lambda_box);
    const double mag = rng.uniform(lambda_box, 2.0 * lambda_box);
    return rng.uniform(0.0, 1.0) < 0.5 ? -mag : mag;
  };
  NoisySample out;
  out.polarity = polarity;
  const double h = gt_box.height(), w = gt_box.width();
  std::array<double, 4> c{gt_box.x0, gt_box.y0, gt_box.x1, gt_box.y1};
  for (std::size_t corner = 0; corner < 2; ++corner) {
    const double a1 = draw();
    const double a2 = draw();
    out.alphas.push_back({a1, a2});
    c[corner * 2] += a2 * w;
    c[corner * 2 + 1] += a1 * h;
  }
  out.instance.bbox = {std::min(c[0], c[2]), std::min(c[1], c[3]), std::max(c[0], c[2]), std::max(c[1], c[3])};
  out.instance.area = out.instance.bbox.area();
  return out;
}

// Arrangement of denoising queries: for each group, all positives (one per
// ground truth) then all negatives. Matching queries follow all groups.
struct DnLayout {
  std::size_t groups = 0;
  std::size_t num_gt = 0;

  std::size_t per_group() const { return 2 * num_gt; }
  std::size_t total_dn_queries() const { return groups * per_group(); }
  std::size_t matching_query_offset() const { return total_dn_queries(); }

  std::size_t index(std::size_t group, std::size_t gt, Polarity p) const {
    return group * per_group() + (p == Polarity::Negative ? num_gt : 0) + gt;
  }
  std::size_t group_of(std::size_t idx) const { return idx / per_group(); }
  Polarity polarity_of(std::size_t idx) const {
    return (idx % per_group()) < num_gt ? Polarity::Positive : Polarity::Negative;
  }
  std::size_t gt_of(std::size_t idx) const { return (idx % per_group()) % num_gt; }
};

// Number of groups actually used so that total DN queries stay within the
// matching-query budget.
inline std::size_t effective_dn_groups(std::size_t requested, std::size_t num_gt, std::size_t num_matching) {
  if (num_gt == 0) return 0;
  return std::min(requested, num_matching / (2 * num_gt));
}

// One positive and one negative pose sample per ground truth per group,
// ordered as DnLayout::index describes. Ground truths are normalized.
template <typename R>
std::pair<DnLayout, std::vector<NoisySample>> build_dn_layout(const std::vector<PersonInstance>& gts,
                                                             std::size_t num_groups, const KsParams& params,
                                                             R& rng) {
  DnLayout layout{gts.empty() ? 0 : num_groups, gts.size()};
  std::vector<NoisySample> samples(layout.total_dn_queries());
  for (std::size_t g = 0; g < layout.groups; ++g)
    for (Polarity p : {Polarity::Positive, Polarity::Negative})
      for (std::size_t j = 0; j < gts.size(); ++j) {
        auto s = gen_pose_queries(gts[j], p, params, rng);
        s.source_gt = j;
        samples[layout.index(g, j, p)] = std::move(s);
      }
  return {layout, std::move(samples)};
}

// Blocks attention between different partitions {group 0, ..., group G-1,
// matching}; nothing is blocked inside a partition.
inline AttnMask build_attention_mask(const DnLayout& layout, std::size_t num_matching) {
  const std::size_t dn = layout.total_dn_queries(), n = dn + num_matching;
  auto partition = [&](std::size_t i) { return i < dn ? layout.group_of(i) : layout.groups; };
  AttnMask mask(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask.set(i, j, partition(i) != partition(j));
  return mask;
}

}  // namespace detrpose
