#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "detrpose/errors.hpp"

namespace detrpose {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  bool visible = false;

  bool operator==(const Keypoint&) const = default;
};

struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool operator==(const Box&) const = default;
};

// One person: keypoints, box and area. Coordinates are either pixels (as
// read from annotations) or normalized by max(image width, height).
struct PersonInstance {
  std::vector<Keypoint> keypoints;
  Box bbox;
  double area = 0.0;

  std::size_t num_visible() const {
    return static_cast<std::size_t>(std::count_if(keypoints.begin(), keypoints.end(),
                                                  [](const Keypoint& k) { return k.visible; }));
  }
  bool operator==(const PersonInstance&) const = default;
};

// Per-keypoint fall-off constants of the similarity metric.
struct KsParams {
  std::vector<double> kappa;

  static KsParams uniform(std::size_t num_keypoints, double value = 0.1) {
    return KsParams{std::vector<double>(num_keypoints, value)};
  }
  void validate() const {
    for (double k : kappa)
      if (!(k > 0.0)) throw ArgumentError("kappa entries must be positive");
  }
};

inline PersonInstance normalize_instance(const PersonInstance& raw, double img_w, double img_h) {
  if (!(img_w > 0.0) || !(img_h > 0.0)) throw ArgumentError("image dimensions must be positive");
  const double s = std::max(img_w, img_h);
  PersonInstance out = raw;
  for (auto& k : out.keypoints) {
    k.x /= s;
    k.y /= s;
  }
  out.bbox = {raw.bbox.x0 / s, raw.bbox.y0 / s, raw.bbox.x1 / s, raw.bbox.y1 / s};
  out.area = raw.area / (s * s);
  return out;
}

// exp(-d^2 / (2 s^2 kappa^2)).
inline double keypoint_similarity(double d, double s, double kappa) {
  if (!(s > 0.0) || !(kappa > 0.0)) throw ArgumentError("keypoint_similarity: scale and kappa must be positive");
  if (d < 0.0) throw ArgumentError("keypoint_similarity: distance must be non-negative");
  return std::exp(-(d * d) / (2.0 * s * s * kappa * kappa));
}

// Mean similarity over ground-truth-visible keypoints, with s = sqrt(gt area).
inline double instance_oks(const PersonInstance& pred, const PersonInstance& gt, const KsParams& params) {
  const std::size_t k = gt.keypoints.size();
  if (pred.keypoints.size() != k || params.kappa.size() != k)
    throw ArgumentError("instance_oks: keypoint counts differ");
  if (!(gt.area > 0.0)) throw DegenerateInstanceError("instance_oks: ground-truth area is zero");
  const double s = std::sqrt(gt.area);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!gt.keypoints[i].visible) continue;
    const double d = std::hypot(pred.keypoints[i].x - gt.keypoints[i].x, pred.keypoints[i].y - gt.keypoints[i].y);
    acc += keypoint_similarity(d, s, params.kappa[i]);
    ++n;
  }
  if (n == 0) return pred.keypoints == gt.keypoints ? 1.0 : 0.0;
  return acc / static_cast<double>(n);
}

// Tight box over visible keypoints, each side pushed out by margin times
// the box diagonal.
inline Box bbox_from_keypoints(const PersonInstance& instance, double margin = 0.0) {
  bool any = false;
  Box b;
  for (const auto& k : instance.keypoints) {
    if (!k.visible) continue;
    if (!any) {
      b = {k.x, k.y, k.x, k.y};
      any = true;
    } else {
      b.x0 = std::min(b.x0, k.x);
      b.y0 = std::min(b.y0, k.y);
      b.x1 = std::max(b.x1, k.x);
      b.y1 = std::max(b.y1, k.y);
    }
  }
  if (!any) throw DegenerateInstanceError("bbox_from_keypoints: no visible keypoint");
  const double pad = margin * std::hypot(b.width(), b.height());
  return {b.x0 - pad, b.y0 - pad, b.x1 + pad, b.y1 + pad};
}

}  // namespace detrpose
