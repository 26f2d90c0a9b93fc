#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "detrpose/geometry.hpp"
#include "detrpose/random.hpp"
#include "detrpose/tensor.hpp"

namespace detrpose {

// Tree over the keypoints. Each bone has a nominal child offset from its
// parent in figure units (x right, y down) and an angular jitter.
struct Skeleton {
  std::size_t num_keypoints = 0;
  std::size_t root = 0;
  std::vector<std::pair<std::size_t, std::size_t>> bones;
  std::vector<std::array<double, 2>> offsets;
  std::vector<double> jitter;

  void validate() const {
    if (num_keypoints == 0) throw ArgumentError("skeleton has no keypoints");
    if (bones.size() + 1 != num_keypoints || offsets.size() != bones.size() || jitter.size() != bones.size())
      throw ArgumentError("skeleton is not a tree over its keypoints");
    std::vector<char> reached(num_keypoints, 0);
    reached.at(root) = 1;
    for (const auto& [parent, child] : bones) {
      if (parent >= num_keypoints || child >= num_keypoints || !reached[parent] || reached[child])
        throw ArgumentError("skeleton bones must be listed parent-first and form a tree");
      reached[child] = 1;
    }
  }

  // neck, head, left hand, right hand, pelvis
  static Skeleton star5() {
    return {5, 0, {{0, 1}, {0, 2}, {0, 3}, {0, 4}},
            {{{0.0, -0.3}}, {{0.45, 0.3}}, {{-0.45, 0.3}}, {{0.0, 0.55}}},
            {0.2, 0.4, 0.4, 0.2}};
  }

  // COCO order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
  static Skeleton coco17() {
    return {17,
            0,
            {{0, 1}, {0, 2}, {1, 3}, {2, 4}, {0, 5}, {0, 6}, {5, 7}, {6, 8}, {7, 9}, {8, 10},
             {5, 11}, {6, 12}, {11, 13}, {12, 14}, {13, 15}, {14, 16}},
            {{{0.04, -0.04}}, {{-0.04, -0.04}}, {{0.06, 0.01}}, {{-0.06, 0.01}}, {{0.17, 0.2}}, {{-0.17, 0.2}},
             {{0.05, 0.25}}, {{-0.05, 0.25}}, {{0.02, 0.22}}, {{-0.02, 0.22}}, {{-0.06, 0.38}}, {{0.06, 0.38}},
             {{0.01, 0.27}}, {{-0.01, 0.27}}, {{0.0, 0.26}}, {{0.0, 0.26}}},
            {0.2, 0.2, 0.2, 0.2, 0.1, 0.1, 0.6, 0.6, 0.6, 0.6, 0.12, 0.12, 0.4, 0.4, 0.3, 0.3}};
  }

  static Skeleton for_keypoints(std::size_t k) {
    if (k == 5) return star5();
    if (k == 17) return coco17();
    throw ArgumentError("no built-in skeleton with " + std::to_string(k) + " keypoints");
  }
};

struct SceneSpec {
  std::size_t img_size = 160;
  std::size_t max_persons = 4;
  Skeleton skeleton = Skeleton::star5();
  std::uint64_t seed = 0;
  double scale_lo = 0.25;  // figure size as a fraction of img_size
  double scale_hi = 0.45;
  double bbox_margin = 0.1;

  void validate() const {
    if (img_size < 64) throw ArgumentError("img_size must be at least 64");
    if (max_persons == 0) throw ArgumentError("max_persons must be positive");
    if (!(scale_lo > 0.0) || scale_hi < scale_lo) throw ArgumentError("invalid figure scale range");
    skeleton.validate();
  }
};

// Pixel-space instances of one scene.
struct Annotation {
  std::int64_t id = 0;
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<PersonInstance> instances;

  bool operator==(const Annotation&) const = default;
};

struct Scene {
  Tensor<float> image;  // [H, W, 3] in [0, 1]
  Annotation annotation;
};

namespace detail {

inline std::array<float, 3> joint_color(std::size_t k, std::size_t n) {
  const double h = 6.0 * static_cast<double>(k) / static_cast<double>(n);
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> c{};
  switch (static_cast<int>(h)) {
    case 0: c = {1, x, 0}; break;
    case 1: c = {x, 1, 0}; break;
    case 2: c = {0, 1, x}; break;
    case 3: c = {0, x, 1}; break;
    case 4: c = {x, 0, 1}; break;
    default: c = {1, 0, x}; break;
  }
  return {static_cast<float>(c[0]), static_cast<float>(c[1]), static_cast<float>(c[2])};
}

inline void blend(std::vector<float>& img, std::size_t w, std::size_t x, std::size_t y,
                  const std::array<float, 3>& color, float a) {
  float* px = img.data() + (y * w + x) * 3;
  for (int c = 0; c < 3; ++c) px[c] = px[c] * (1.0f - a) + color[c] * a;
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay, len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

// Anti-aliased capsule of half-width hw between two points.
inline void draw_segment(std::vector<float>& img, std::size_t size, double ax, double ay, double bx, double by,
                         double hw, const std::array<float, 3>& color) {
  const double pad = hw + 1.0;
  const auto lo = [&](double v) { return static_cast<std::ptrdiff_t>(std::floor(v - pad)); };
  const auto hi = [&](double v) { return static_cast<std::ptrdiff_t>(std::ceil(v + pad)); };
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(size);
  const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, lo(std::min(ax, bx)));
  const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(n - 1, hi(std::max(ax, bx)));
  const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, lo(std::min(ay, by)));
  const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(n - 1, hi(std::max(ay, by)));
  for (std::ptrdiff_t y = y0; y <= y1; ++y)
    for (std::ptrdiff_t x = x0; x <= x1; ++x) {
      const double d = segment_distance(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, ax, ay, bx, by);
      const double a = std::clamp(hw + 0.5 - d, 0.0, 1.0);
      if (a > 0.0) blend(img, size, static_cast<std::size_t>(x), static_cast<std::size_t>(y), color, static_cast<float>(a));
    }
}

// Smooth value noise plus per-pixel grain.
inline std::vector<float> noise_background(std::size_t size, Rng& rng) {
  constexpr std::size_t cell = 16;
  const std::size_t g = size / cell + 2;
  std::vector<float> grid(g * g * 3);
  for (auto& v : grid) v = static_cast<float>(rng.uniform(0.0, 0.3));
  std::vector<float> img(size * size * 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / cell, fy = static_cast<double>(y) / cell;
      const std::size_t ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);
      const double tx = fx - static_cast<double>(ix), ty = fy - static_cast<double>(iy);
      for (std::size_t c = 0; c < 3; ++c) {
        auto at = [&](std::size_t gx, std::size_t gy) { return static_cast<double>(grid[(gy * g + gx) * 3 + c]); };
        const double v = (1 - ty) * ((1 - tx) * at(ix, iy) + tx * at(ix + 1, iy)) +
                         ty * ((1 - tx) * at(ix, iy + 1) + tx * at(ix + 1, iy + 1));
        img[(y * size + x) * 3 + c] = static_cast<float>(std::clamp(v + rng.uniform(-0.05, 0.05), 0.0, 1.0));
      }
    }
  return img;
}

inline bool in_bounds(double x, double y, std::size_t w, std::size_t h) {
  return x >= 0.0 && y >= 0.0 && x < static_cast<double>(w) && y < static_cast<double>(h);
}

// Joint positions of one figure with its root at the origin.
inline std::vector<std::array<double, 2>> pose_figure(const Skeleton& sk, double scale, double rotation, Rng& rng) {
  std::vector<std::array<double, 2>> pts(sk.num_keypoints, {0.0, 0.0});
  for (std::size_t b = 0; b < sk.bones.size(); ++b) {
    const auto [parent, child] = sk.bones[b];
    const double len = std::hypot(sk.offsets[b][0], sk.offsets[b][1]) * scale * rng.uniform(0.85, 1.15);
    const double ang = std::atan2(sk.offsets[b][1], sk.offsets[b][0]) + rotation + rng.uniform(-sk.jitter[b], sk.jitter[b]);
    pts[child] = {pts[parent][0] + len * std::cos(ang), pts[parent][1] + len * std::sin(ang)};
  }
  return pts;
}

}  // namespace detail

// Renders 1..max_persons stick figures. Keypoints keep their geometric
// position; a keypoint is visible exactly when it lies inside the image.
inline Scene gen_scene(const SceneSpec& spec, Rng& rng, std::int64_t id = 0) {
  spec.validate();
  const std::size_t size = spec.img_size, k = spec.skeleton.num_keypoints;
  const double s = static_cast<double>(size);
  const std::size_t persons = 1 + rng.index(spec.max_persons);

  std::vector<std::vector<std::array<double, 2>>> figures;
  std::vector<std::array<double, 2>> centers;
  std::vector<double> scales;
  for (int attempt = 0; figures.size() < persons && attempt < 200; ++attempt) {
    const double scale = s * rng.uniform(spec.scale_lo, spec.scale_hi);
    auto pts = detail::pose_figure(spec.skeleton, scale, rng.uniform(-0.35, 0.35), rng);
    double cx = 0.0, cy = 0.0;
    for (const auto& p : pts) {
      cx += p[0] / static_cast<double>(k);
      cy += p[1] / static_cast<double>(k);
    }
    const double tx = rng.uniform(0.1, 0.9) * s - cx, ty = rng.uniform(0.1, 0.9) * s - cy;
    for (auto& p : pts) {
      p[0] += tx;
      p[1] += ty;
    }
    const std::array<double, 2> c{cx + tx, cy + ty};
    bool crowded = false;
    for (std::size_t i = 0; i < centers.size(); ++i)
      crowded = crowded || std::hypot(c[0] - centers[i][0], c[1] - centers[i][1]) < 0.5 * (scale + scales[i]);
    std::size_t visible = 0;
    for (const auto& p : pts) visible += detail::in_bounds(p[0], p[1], size, size) ? 1 : 0;
    if (crowded || visible < 2) continue;
    figures.push_back(std::move(pts));
    centers.push_back(c);
    scales.push_back(scale);
  }

  auto img = detail::noise_background(size, rng);
  const std::array<float, 3> bone_color{0.95f, 0.95f, 0.95f};
  for (const auto& pts : figures)
    for (const auto& [a, b] : spec.skeleton.bones)
      detail::draw_segment(img, size, pts[a][0], pts[a][1], pts[b][0], pts[b][1], 1.0, bone_color);
  for (const auto& pts : figures)
    for (std::size_t j = 0; j < k; ++j)
      detail::draw_segment(img, size, pts[j][0], pts[j][1], pts[j][0], pts[j][1], 2.5, detail::joint_color(j, k));

  Scene scene;
  scene.image = Tensor<float>({size, size, 3}, std::move(img));
  scene.annotation.id = id;
  scene.annotation.width = static_cast<std::int64_t>(size);
  scene.annotation.height = static_cast<std::int64_t>(size);
  for (const auto& pts : figures) {
    PersonInstance inst;
    for (const auto& p : pts) inst.keypoints.push_back({p[0], p[1], detail::in_bounds(p[0], p[1], size, size)});
    inst.bbox = bbox_from_keypoints(inst, spec.bbox_margin);
    inst.area = inst.bbox.area();
    scene.annotation.instances.push_back(std::move(inst));
  }
  return scene;
}

// Scene i uses the stream (seed, i), so datasets are prefix-stable.
inline std::vector<Scene> gen_dataset(const SceneSpec& spec, std::size_t count, std::size_t first_id = 0) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::stream(spec.seed, first_id + i);
    out.push_back(gen_scene(spec, rng, static_cast<std::int64_t>(first_id + i)));
  }
  return out;
}

// ---- annotations ----

inline nlohmann::json annotation_to_json(const Annotation& a) {
  nlohmann::json inst = nlohmann::json::array();
  for (const auto& p : a.instances) {
    nlohmann::json kps = nlohmann::json::array();
    for (const auto& k : p.keypoints) kps.push_back({k.x, k.y, k.visible ? 1 : 0});
    inst.push_back({{"keypoints", kps}, {"bbox", {p.bbox.x0, p.bbox.y0, p.bbox.x1, p.bbox.y1}}, {"area", p.area}});
  }
  return {{"id", a.id}, {"width", a.width}, {"height", a.height}, {"instances", inst}};
}

inline Annotation annotation_from_json(const nlohmann::json& j) {
  Annotation a;
  a.id = j.at("id").get<std::int64_t>();
  a.width = j.at("width").get<std::int64_t>();
  a.height = j.at("height").get<std::int64_t>();
  for (const auto& ji : j.at("instances")) {
    PersonInstance p;
    for (const auto& jk : ji.at("keypoints")) {
      if (!jk.is_array() || jk.size() != 3) throw std::invalid_argument("keypoint must be [x, y, v]");
      const int v = jk[2].get<int>();
      if (v != 0 && v != 1) throw std::invalid_argument("visibility must be 0 or 1");
      p.keypoints.push_back({jk[0].get<double>(), jk[1].get<double>(), v == 1});
    }
    const auto& b = ji.at("bbox");
    if (!b.is_array() || b.size() != 4) throw std::invalid_argument("bbox must have 4 entries");
    p.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    p.area = ji.at("area").get<double>();
    a.instances.push_back(std::move(p));
  }
  return a;
}

inline void write_annotations(std::ostream& os, const std::vector<Annotation>& anns) {
  for (const auto& a : anns) os << annotation_to_json(a).dump() << '\n';
}

inline void write_annotations(const std::string& path, const std::vector<Annotation>& anns) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_annotations(os, anns);
  if (!os) throw FormatError("write failed: " + path);
}

inline std::vector<Annotation> read_annotations(std::istream& is) {
  std::vector<Annotation> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(annotation_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(e.what(), n);
    }
  }
  return out;
}

inline std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_annotations(is);
}

// ---- evaluation ----

struct ScoredInstance {
  PersonInstance instance;
  double score = 0.0;
};

struct ApReport {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar = 0.0;
  std::vector<double> ap_per_threshold;
  std::vector<double> recall_per_threshold;
};

inline std::vector<double> oks_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

// AP at one threshold: per image, predictions in descending score claim the
// best-OKS unclaimed ground truth; then 101-point interpolated precision.
inline std::pair<double, double> ap_at(const std::vector<std::vector<ScoredInstance>>& preds,
                                       const std::vector<Annotation>& gts, const KsParams& ks, double threshold) {
  struct Det {
    double score;
    std::size_t image, order;
    bool tp;
  };
  std::vector<Det> dets;
  std::size_t num_gt = 0;
  for (std::size_t im = 0; im < gts.size(); ++im) {
    const auto& g = gts[im].instances;
    num_gt += g.size();
    const auto& p = preds[im];
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a].score > p[b].score; });
    std::vector<char> taken(g.size(), 0);
    for (std::size_t r = 0; r < order.size(); ++r) {
      double best = threshold;
      std::ptrdiff_t hit = -1;
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (taken[j]) continue;
        const double o = instance_oks(p[order[r]].instance, g[j], ks);
        if (o >= best) {
          best = o;
          hit = static_cast<std::ptrdiff_t>(j);
        }
      }
      if (hit >= 0) taken[static_cast<std::size_t>(hit)] = 1;
      dets.push_back({p[order[r]].score, im, r, hit >= 0});
    }
  }
  if (num_gt == 0) return {0.0, 0.0};
  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image != b.image ? a.image < b.image : a.order < b.order;
  });
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    tp += dets[i].tp ? 1 : 0;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level);
    if (it != recall.end()) ap += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return {ap / 101.0, recall.empty() ? 0.0 : recall.back()};
}

// preds[i] holds the scored predictions for image gts[i], in the same
// coordinate frame as the ground truth.
inline ApReport eval_ap(const std::vector<std::vector<ScoredInstance>>& preds, const std::vector<Annotation>& gts,
                        const KsParams& ks) {
  if (preds.size() != gts.size()) throw DimensionError("eval_ap: prediction and ground-truth image counts differ");
  ApReport r;
  for (double t : oks_thresholds()) {
    const auto [ap, rec] = ap_at(preds, gts, ks, t);
    r.ap_per_threshold.push_back(ap);
    r.recall_per_threshold.push_back(rec);
  }
  const auto avg = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  r.ap = avg(r.ap_per_threshold);
  r.ar = avg(r.recall_per_threshold);
  r.ap50 = r.ap_per_threshold[0];
  r.ap75 = r.ap_per_threshold[5];
  return r;
}

inline nlohmann::json to_json(const ApReport& r) {
  return {{"AP", r.ap}, {"AP50", r.ap50}, {"AP75", r.ap75}, {"AR", r.ar}};
}

// ---- NTC v1 container ----

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

inline constexpr char kNtcMagic[4] = {'N', 'T', 'C', '1'};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline std::uint64_t get_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const NamedTensors& tensors) {
  nlohmann::json header = nlohmann::json::array();
  std::set<std::string> names;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (!names.insert(name).second) throw FormatError("duplicate tensor name: " + name);
    header.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * 4;
  }
  const std::string h = header.dump();
  os.write(kNtcMagic, 4);
  detail::put_u64(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, t] : tensors) {
    std::string bytes(t.size() * 4, '\0');
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(t[i]);
      for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
    }
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
}

inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ostringstream buf(std::ios::binary);
  save_checkpoint(buf, tensors);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  const auto s = buf.str();
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!os) throw FormatError("write failed: " + path);
}

inline NamedTensors load_checkpoint(std::istream& is) {
  const std::string raw((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  if (raw.size() < 12) throw FormatError("checkpoint truncated before header");
  if (std::memcmp(raw.data(), kNtcMagic, 4) != 0) throw FormatError("bad checkpoint magic");
  const std::uint64_t hlen = detail::get_u64(bytes + 4);
  if (hlen > raw.size() - 12) throw FormatError("checkpoint truncated inside header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (!header.is_array()) throw FormatError("checkpoint header must be an array");
  const std::size_t base = 12 + hlen;
  const std::size_t payload = raw.size() - base;
  NamedTensors out;
  std::set<std::string> names;
  for (const auto& e : header) {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("checkpoint header entry: ") + ex.what());
    }
    if (!names.insert(name).second) throw FormatError("duplicate tensor name: " + name);
    const std::size_t n = numel(shape);
    if (offset > payload || n * 4 > payload - offset) throw FormatError("checkpoint truncated in tensor " + name);
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned char* p = bytes + base + offset + i * 4;
      const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                              static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
      data[i] = std::bit_cast<float>(u);
    }
    out.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return out;
}

inline NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return load_checkpoint(is);
}

// A dataset directory holds scenes.ntc (one [H,W,3] tensor per scene, in
// annotation order) and annotations.jsonl.
inline void save_dataset(const std::string& dir, const std::vector<Scene>& scenes) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create directory " + dir + ": " + ec.message());
  NamedTensors images;
  std::vector<Annotation> anns;
  for (const auto& s : scenes) {
    std::ostringstream name;
    name << "scene_" << std::setw(6) << std::setfill('0') << s.annotation.id;
    images.emplace_back(name.str(), s.image);
    anns.push_back(s.annotation);
  }
  save_checkpoint(dir + "/scenes.ntc", images);
  write_annotations(dir + "/annotations.jsonl", anns);
}

inline std::vector<Scene> load_dataset(const std::string& dir) {
  auto images = load_checkpoint(dir + "/scenes.ntc");
  auto anns = read_annotations(dir + "/annotations.jsonl");
  if (images.size() != anns.size())
    throw FormatError(dir + ": " + std::to_string(images.size()) + " images but " + std::to_string(anns.size()) +
                      " annotations");
  std::vector<Scene> out;
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const auto& img = images[i].second;
    if (img.rank() != 3 || img.dim(0) != static_cast<std::size_t>(anns[i].height) ||
        img.dim(1) != static_cast<std::size_t>(anns[i].width))
      throw FormatError(dir + ": image " + images[i].first + " does not match its annotation");
    out.push_back({img, std::move(anns[i])});
  }
  return out;
}

}  // namespace detrpose
