#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "detrpose/attention.hpp"
#include "detrpose/denoising.hpp"
#include "detrpose/ops.hpp"
#include "detrpose/params.hpp"
#include "detrpose/random.hpp"
#include "detrpose/sampling.hpp"
#include "detrpose/topk.hpp"

namespace detrpose {

// Architecture constants. Counts: N instance queries, K keypoints per
// person, k_lqe channels kept per keypoint by the quality head.
struct ModelConfig {
  std::string preset = "tiny";
  std::size_t hidden = 32;
  std::size_t heads = 4;
  std::size_t levels = 3;
  std::size_t points = 4;
  std::size_t decoder_layers = 3;
  std::size_t ffn_dim = 64;
  std::size_t num_queries = 20;
  std::size_t num_keypoints = 5;
  std::size_t k_lqe = 4;
  std::size_t fdr_bins = 16;
  double fdr_range = 0.25;
  std::size_t image_channels = 3;
  std::size_t patch = 8;

  std::size_t tokens_per_instance() const { return num_keypoints + 1; }
  std::size_t coarsest_stride() const { return patch << (levels - 1); }

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0) throw ConfigError("hidden must be a positive multiple of heads");
    if (hidden % 4 != 0) throw ConfigError("hidden must be divisible by 4");
    if (levels == 0 || points == 0 || decoder_layers == 0 || num_queries == 0 || num_keypoints == 0 ||
        fdr_bins < 2 || ffn_dim == 0 || image_channels == 0 || patch == 0)
      throw ConfigError("model counts must be positive");
    if (k_lqe == 0 || k_lqe > hidden) throw ConfigError("k_lqe must lie in [1, hidden]");
    if (!(fdr_range > 0)) throw ConfigError("fdr_range must be positive");
  }

  // tiny | s | m | l. The larger presets mirror decoder depth and width of
  // the published S/M/L family.
  static ModelConfig from_preset(const std::string& name) {
    ModelConfig c;
    c.preset = name;
    if (name == "tiny") return c;
    c.hidden = 256;
    c.heads = 8;
    c.ffn_dim = 1024;
    c.num_queries = 60;
    c.num_keypoints = 17;
    if (name == "s") c.decoder_layers = 3;
    else if (name == "m") c.decoder_layers = 4;
    else if (name == "l") c.decoder_layers = 6;
    else throw ConfigError("unknown preset: " + name);
    return c;
  }
};

template <typename T>
struct FeaturePyramid {
  std::vector<Tensor<T>> levels;    // [H_l * W_l, C], level 0 has the finest stride
  std::vector<LevelShape> shapes;
  Tensor<T> scores;                 // [sum_l H_l * W_l] objectness logits

  std::size_t total_pixels() const { return scores.size(); }
  Tensor<T> highest_map() const { return reshape(levels[0], {shapes[0].height, shapes[0].width, levels[0].dim(1)}); }
};

// Positional and content queries. Instances are ordered denoising first,
// then matching. The instance-query position is always the mean of the
// instance's keypoint positions.
template <typename T>
struct QuerySet {
  std::size_t num_keypoints = 0;
  std::size_t num_dn = 0;
  Tensor<T> keypoints;  // [n * K, 2]
  Tensor<T> content;    // [n, D]
  std::vector<std::size_t> selected_pixels;
  Tensor<T> selection_logits;  // [N] objectness of the selected pixels

  std::size_t num_instances() const { return content.dim(0); }
  std::size_t num_matching() const { return num_instances() - num_dn; }
  Tensor<T> instance_positions() const { return mean_groups(keypoints, num_keypoints); }
  // [n * (K + 1), 2] in token order: K keypoint queries then the instance query.
  Tensor<T> positional() const { return token_positions(keypoints, num_keypoints); }

  static Tensor<T> token_positions(const Tensor<T>& kp, std::size_t k) {
    const std::size_t n = kp.dim(0) / k;
    auto all = concat_rows<T>({kp, mean_groups(kp, k)});
    std::vector<std::size_t> order;
    order.reserve(n * (k + 1));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) order.push_back(i * k + j);
      order.push_back(n * k + i);
    }
    return gather_rows(all, std::move(order));
  }
};

template <typename T>
struct LayerPrediction {
  std::size_t num_keypoints = 0;
  std::size_t num_dn = 0;
  Tensor<T> keypoints;       // [n * K, 2]
  Tensor<T> logits;          // [n, 1] classification head
  Tensor<T> refined_logits;  // [n, 1] after the quality head
  Tensor<T> fdr_logits;      // [n * K, 2 * B]

  std::size_t num_instances() const { return logits.dim(0); }
};

namespace detail {

template <typename T>
Tensor<T> xavier(std::size_t in, std::size_t out, Rng& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<T> d(in * out);
  for (auto& v : d) v = static_cast<T>(rng.uniform(-lim, lim));
  return Tensor<T>({in, out}, std::move(d), true);
}

template <typename T>
void add_linear(ParamStore<T>& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                bool zero = false) {
  p.add(name + ".w", zero ? Tensor<T>::zeros({in, out}, true) : xavier<T>(in, out, rng));
  p.add(name + ".b", Tensor<T>::zeros({out}, true));
}

template <typename T>
void add_norm(ParamStore<T>& p, const std::string& name, std::size_t d) {
  p.add(name + ".g", Tensor<T>::full({d}, T(1), true));
  p.add(name + ".b", Tensor<T>::zeros({d}, true));
}

template <typename T>
Tensor<T> apply_linear(const ParamStore<T>& p, const std::string& name, const Tensor<T>& x) {
  return linear(x, p[name + ".w"], p[name + ".b"]);
}

template <typename T>
Tensor<T> apply_norm(const ParamStore<T>& p, const std::string& name, const Tensor<T>& x) {
  return layer_norm(x, p[name + ".g"], p[name + ".b"]);
}

inline std::string layer_prefix(std::size_t l) { return "dec" + std::to_string(l); }

}  // namespace detail

inline constexpr double kPriorProbability = 0.01;

// Deterministic initialization for a configuration.
template <typename T = float>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore<T> p;
  const std::size_t d = cfg.hidden, k = cfg.num_keypoints;
  const T prior_bias = static_cast<T>(-std::log((1 - kPriorProbability) / kPriorProbability));

  detail::add_linear(p, "enc.patch", cfg.patch * cfg.patch * cfg.image_channels, d, rng);
  detail::add_linear(p, "enc.conv0", 9 * d, d, rng);
  for (std::size_t l = 1; l < cfg.levels; ++l) {
    detail::add_linear(p, "enc.down" + std::to_string(l), 4 * d, d, rng);
    detail::add_linear(p, "enc.conv" + std::to_string(l), 9 * d, d, rng);
  }
  detail::add_linear(p, "enc.score", d, 1, rng);
  p.at("enc.score.b").mutable_data()[0] = prior_bias;
  detail::add_linear(p, "enc.kpt", d, 2 * k, rng, true);

  auto normal = [&](Shape shape) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return Tensor<T>(std::move(shape), std::move(v), true);
  };
  p.add("query.content", normal({cfg.num_queries, d}));
  p.add("query.slot", normal({k + 1, d}));
  p.add("query.dn", normal({1, d}));
  detail::add_linear(p, "pos.fc1", d, d, rng);
  detail::add_linear(p, "pos.fc2", d, d, rng);

  const std::size_t samples = cfg.heads * cfg.levels * cfg.points;
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string pre = detail::layer_prefix(l);
    for (const char* attn : {".within", ".across"}) {
      for (const char* proj : {".q", ".k", ".v", ".o"}) detail::add_linear(p, pre + attn + proj, d, d, rng);
      detail::add_norm(p, pre + attn + ".norm", d);
    }
    detail::add_linear(p, pre + ".deform.value", d, d, rng);
    detail::add_linear(p, pre + ".deform.offset", d, samples * 2, rng, true);
    {
      // sampling points start on rays around the reference, one direction per head
      auto bias = p.at(pre + ".deform.offset.b").mutable_data();
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(cfg.heads);
        double gx = std::cos(theta), gy = std::sin(theta);
        const double m = std::max(std::abs(gx), std::abs(gy));
        gx /= m;
        gy /= m;
        for (std::size_t lv = 0; lv < cfg.levels; ++lv)
          for (std::size_t pt = 0; pt < cfg.points; ++pt) {
            const std::size_t s = (h * cfg.levels + lv) * cfg.points + pt;
            bias[2 * s] = static_cast<T>(gx * static_cast<double>(pt + 1));
            bias[2 * s + 1] = static_cast<T>(gy * static_cast<double>(pt + 1));
          }
      }
    }
    detail::add_linear(p, pre + ".deform.attn", d, samples, rng, true);
    detail::add_linear(p, pre + ".deform.out", d, d, rng);
    detail::add_norm(p, pre + ".deform.norm", d);
    detail::add_linear(p, pre + ".ffn.fc1", d, cfg.ffn_dim, rng);
    detail::add_linear(p, pre + ".ffn.fc2", cfg.ffn_dim, d, rng);
    detail::add_norm(p, pre + ".ffn.norm", d);
    if (l == 0) {
      detail::add_linear(p, pre + ".prepose.fc1", d, d, rng);
      detail::add_linear(p, pre + ".prepose.fc2", d, 2, rng, true);
    }
    detail::add_linear(p, pre + ".fdr", d, 2 * cfg.fdr_bins, rng, true);
    detail::add_linear(p, pre + ".cls", d, 1, rng);
    p.at(pre + ".cls.b").mutable_data()[0] = prior_bias;
    detail::add_linear(p, pre + ".lqe", k * cfg.k_lqe, 1, rng, true);
  }
  return p;
}

// Small strided-convolution stand-in for a backbone plus encoder. Produces
// `levels` maps at strides patch, 2*patch, 4*patch from a square [S,S,C]
// image.
template <typename T>
FeaturePyramid<T> encode_stub(const ParamStore<T>& p, const ModelConfig& cfg, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(2) != cfg.image_channels)
    throw ArgumentError("encode_stub: expected [S,S," + std::to_string(cfg.image_channels) + "] image, got " +
                        shape_str(image.shape()));
  if (image.dim(0) != image.dim(1)) throw ArgumentError("encode_stub: image must be square");
  if (image.dim(0) == 0 || image.dim(0) % cfg.coarsest_stride() != 0)
    throw ArgumentError("encode_stub: side " + std::to_string(image.dim(0)) + " is not divisible by " +
                        std::to_string(cfg.coarsest_stride()));
  const std::size_t d = cfg.hidden;
  FeaturePyramid<T> out;
  std::size_t side = image.dim(0) / cfg.patch;
  auto x = relu(detail::apply_linear(p, "enc.patch", patchify(image, cfg.patch)));
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    if (l > 0) {
      x = relu(detail::apply_linear(p, "enc.down" + std::to_string(l), patchify(reshape(x, {side, side, d}), 2)));
      side /= 2;
    }
    x = relu(add(x, detail::apply_linear(p, "enc.conv" + std::to_string(l), unfold3x3(x, side, side))));
    out.levels.push_back(x);
    out.shapes.push_back({side, side});
  }
  auto all = concat_rows(out.levels);
  out.scores = reshape(detail::apply_linear(p, "enc.score", all), {all.dim(0)});
  return out;
}

// Center of a flat pixel index over the concatenated levels.
inline std::array<double, 2> pixel_center(const std::vector<LevelShape>& shapes, std::size_t flat) {
  for (const auto& s : shapes) {
    const std::size_t n = s.height * s.width;
    if (flat < n) {
      return {(static_cast<double>(flat % s.width) + 0.5) / static_cast<double>(s.width),
              (static_cast<double>(flat / s.width) + 0.5) / static_cast<double>(s.height)};
    }
    flat -= n;
  }
  throw BoundsError("pixel_center: index out of range");
}

// Top-N pixels by objectness; each spawns K keypoint positions from a
// learned offset head on its feature. Content queries are learned and
// image-independent.
template <typename T>
QuerySet<T> select_queries(const ParamStore<T>& p, const ModelConfig& cfg, const FeaturePyramid<T>& pyramid) {
  const std::size_t n = cfg.num_queries, k = cfg.num_keypoints;
  if (n > pyramid.total_pixels())
    throw BoundsError("select_queries: " + std::to_string(n) + " queries exceed " +
                      std::to_string(pyramid.total_pixels()) + " pixels");
  auto top = topk(pyramid.scores, n);
  auto features = gather_rows(concat_rows(pyramid.levels), top.indices);
  auto offsets = reshape(detail::apply_linear(p, "enc.kpt", features), {n * k, 2});
  std::vector<T> centers(n * k * 2);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = pixel_center(pyramid.shapes, top.indices[i]);
    for (std::size_t j = 0; j < k; ++j) {
      centers[(i * k + j) * 2] = static_cast<T>(c[0]);
      centers[(i * k + j) * 2 + 1] = static_cast<T>(c[1]);
    }
  }
  QuerySet<T> q;
  q.num_keypoints = k;
  q.keypoints = clamp(add(offsets, Tensor<T>({n * k, 2}, std::move(centers))), T(0), T(1));
  q.content = p["query.content"];
  q.selected_pixels = top.indices;
  q.selection_logits = top.values;
  return q;
}

// Prepends denoising instances built from noisy ground truth. Their content
// is a single learned embedding.
template <typename T>
QuerySet<T> add_denoising_queries(const ParamStore<T>& p, const QuerySet<T>& matching,
                                  const std::vector<NoisySample>& samples) {
  if (samples.empty()) return matching;
  const std::size_t k = matching.num_keypoints;
  std::vector<T> kp;
  kp.reserve(samples.size() * k * 2);
  for (const auto& s : samples) {
    if (s.instance.keypoints.size() != k) throw DimensionError("denoising sample keypoint count mismatch");
    for (const auto& pt : s.instance.keypoints) {
      kp.push_back(static_cast<T>(pt.x));
      kp.push_back(static_cast<T>(pt.y));
    }
  }
  QuerySet<T> q = matching;
  q.num_dn = samples.size();
  q.keypoints = concat_rows<T>({Tensor<T>({samples.size() * k, 2}, std::move(kp)), matching.keypoints});
  q.content = concat_rows<T>({gather_rows(p["query.dn"], std::vector<std::size_t>(samples.size(), 0)), matching.content});
  return q;
}

namespace detail {

template <typename T>
Tensor<T> self_attention_block(const ParamStore<T>& p, const std::string& name, const Tensor<T>& tgt,
                               const Tensor<T>& pos, const std::vector<std::vector<std::size_t>>& groups,
                               std::size_t heads, const AttnMask* mask) {
  auto qk_in = add(tgt, pos);
  auto q = apply_linear(p, name + ".q", qk_in);
  auto k = apply_linear(p, name + ".k", qk_in);
  auto v = apply_linear(p, name + ".v", tgt);
  auto attn = apply_linear(p, name + ".o", grouped_attention(q, k, v, groups, heads, mask));
  return apply_norm(p, name + ".norm", add(tgt, attn));
}

}  // namespace detail

// Self-attention among the K+1 tokens of each instance.
template <typename T>
Tensor<T> within_instance_attention(const ParamStore<T>& p, const std::string& name, const Tensor<T>& tgt,
                                    const Tensor<T>& pos, std::size_t tokens_per_instance, std::size_t heads) {
  const std::size_t n = tgt.dim(0) / tokens_per_instance;
  std::vector<std::vector<std::size_t>> groups(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < tokens_per_instance; ++j) groups[i].push_back(i * tokens_per_instance + j);
  return detail::self_attention_block(p, name, tgt, pos, groups, heads, static_cast<const AttnMask*>(nullptr));
}

// Self-attention across instances for each token slot, with the
// denoising-partition mask applied over instances.
template <typename T>
Tensor<T> across_instance_attention(const ParamStore<T>& p, const std::string& name, const Tensor<T>& tgt,
                                    const Tensor<T>& pos, std::size_t tokens_per_instance, std::size_t heads,
                                    const AttnMask& mask) {
  const std::size_t n = tgt.dim(0) / tokens_per_instance;
  if (mask.rows != n || mask.cols != n)
    throw DimensionError("across_instance_attention: mask is " + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + " for " + std::to_string(n) + " instances");
  std::vector<std::vector<std::size_t>> groups(tokens_per_instance);
  for (std::size_t j = 0; j < tokens_per_instance; ++j)
    for (std::size_t i = 0; i < n; ++i) groups[j].push_back(i * tokens_per_instance + j);
  return detail::self_attention_block(p, name, tgt, pos, groups, heads, &mask);
}

// Each token samples `points` locations per head and level around its
// reference point and mixes them with softmax weights.
template <typename T>
Tensor<T> deformable_cross_attention(const ParamStore<T>& p, const std::string& name, const ModelConfig& cfg,
                                     const Tensor<T>& tgt, const Tensor<T>& pos, const Tensor<T>& refs,
                                     const std::vector<Tensor<T>>& values, const std::vector<LevelShape>& shapes) {
  const std::size_t t = tgt.dim(0), nl = shapes.size();
  const std::size_t samples = cfg.heads * nl * cfg.points;
  if (nl != cfg.levels) throw DimensionError("deformable_cross_attention: level count mismatch");
  auto query = add(tgt, pos);
  auto offsets = detail::apply_linear(p, name + ".offset", query);
  std::vector<T> norm(samples * 2);
  std::vector<T> replicate(2 * samples * 2, T(0));
  for (std::size_t h = 0; h < cfg.heads; ++h)
    for (std::size_t l = 0; l < nl; ++l)
      for (std::size_t m = 0; m < cfg.points; ++m) {
        const std::size_t s = (h * nl + l) * cfg.points + m;
        norm[2 * s] = T(1) / static_cast<T>(shapes[l].width);
        norm[2 * s + 1] = T(1) / static_cast<T>(shapes[l].height);
        replicate[0 * samples * 2 + 2 * s] = T(1);
        replicate[1 * samples * 2 + 2 * s + 1] = T(1);
      }
  auto locations = add(mul(offsets, Tensor<T>({samples * 2}, std::move(norm))),
                       matmul(refs, Tensor<T>({2, samples * 2}, std::move(replicate))));
  auto weights = reshape(softmax_rows(reshape(detail::apply_linear(p, name + ".attn", query), {t * cfg.heads, nl * cfg.points})),
                         {t, samples});
  auto core = ms_deform_attn(values, shapes, locations, weights, cfg.heads, cfg.points);
  return detail::apply_norm(p, name + ".norm", add(tgt, detail::apply_linear(p, name + ".out", core)));
}

// Expected offset under a softmax over B symmetric, evenly spaced bin
// centers in [-bin_range, bin_range], per keypoint and axis.
// bin_logits: [P, 2B] (x bins then y bins); prev: [P, 2].
template <typename T>
Tensor<T> fdr_refine(const Tensor<T>& bin_logits, const Tensor<T>& prev, T bin_range) {
  detail::require_2d(bin_logits, "fdr_refine");
  const std::size_t pts = prev.dim(0);
  if (bin_logits.dim(0) != pts || bin_logits.dim(1) % 2 != 0 || bin_logits.dim(1) < 4)
    throw DimensionError("fdr_refine: bin logits " + shape_str(bin_logits.shape()) + " for " + std::to_string(pts) +
                         " points");
  const std::size_t b = bin_logits.dim(1) / 2;
  std::vector<T> centers(b);
  for (std::size_t i = 0; i < b; ++i)
    centers[i] = bin_range * (T(2) * static_cast<T>(i) / static_cast<T>(b - 1) - T(1));
  auto probs = softmax_rows(reshape(bin_logits, {pts * 2, b}));
  auto offset = reshape(matmul(probs, Tensor<T>({b, 1}, std::move(centers))), {pts, 2});
  return clamp(add(prev, offset), T(0), T(1));
}

// Samples a C-vector at each keypoint from the highest-resolution map,
// keeps the k_lqe largest channels, and maps the K*k_lqe values to a
// correction added to the classification logit.
// keypoints: [n*K, 2]; base_logits: [n, 1]; highest_map: [H, W, C].
template <typename T>
Tensor<T> pose_lqe(const ParamStore<T>& p, const std::string& name, const Tensor<T>& keypoints,
                   const Tensor<T>& highest_map, const Tensor<T>& base_logits, std::size_t k_lqe,
                   std::size_t num_keypoints) {
  if (k_lqe > highest_map.dim(2))
    throw ArgumentError("pose_lqe: k_lqe=" + std::to_string(k_lqe) + " exceeds " +
                        std::to_string(highest_map.dim(2)) + " channels");
  const std::size_t n = base_logits.dim(0);
  auto feats = bilinear_sample(highest_map, keypoints);
  auto top = topk_rows(feats, k_lqe).values;
  auto flat = reshape(top, {n, num_keypoints * k_lqe});
  return add(base_logits, detail::apply_linear(p, name, flat));
}

// Runs every decoder layer; one prediction per layer. `mask` blocks
// attention between denoising groups and matching queries.
template <typename T>
std::vector<LayerPrediction<T>> decoder_forward(const ParamStore<T>& p, const ModelConfig& cfg,
                                                const FeaturePyramid<T>& pyramid, const QuerySet<T>& queries,
                                                const AttnMask& mask) {
  const std::size_t k = cfg.num_keypoints, k1 = k + 1, n = queries.num_instances(), d = cfg.hidden;
  if (queries.num_keypoints != k) throw DimensionError("decoder_forward: keypoint count mismatch");

  std::vector<std::size_t> inst_of_token(n * k1), slot_of_token(n * k1), kpt_tokens, inst_tokens;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k1; ++j) {
      inst_of_token[i * k1 + j] = i;
      slot_of_token[i * k1 + j] = j;
      (j < k ? kpt_tokens : inst_tokens).push_back(i * k1 + j);
    }
  auto tgt = add(gather_rows(queries.content, inst_of_token), gather_rows(p["query.slot"], slot_of_token));
  auto kp = queries.keypoints;
  const auto highest = pyramid.highest_map();

  std::vector<LayerPrediction<T>> out;
  T range = static_cast<T>(cfg.fdr_range);
  for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string pre = detail::layer_prefix(l);
    const auto refs = QuerySet<T>::token_positions(kp, k);
    const auto pos = detail::apply_linear(
        p, "pos.fc2", relu(detail::apply_linear(p, "pos.fc1", sine_embed(refs, d))));
    tgt = within_instance_attention(p, pre + ".within", tgt, pos, k1, cfg.heads);
    tgt = across_instance_attention(p, pre + ".across", tgt, pos, k1, cfg.heads, mask);
    std::vector<Tensor<T>> values;
    for (const auto& level : pyramid.levels) values.push_back(detail::apply_linear(p, pre + ".deform.value", level));
    tgt = deformable_cross_attention(p, pre + ".deform", cfg, tgt, pos, refs, values, pyramid.shapes);
    auto ffn = detail::apply_linear(p, pre + ".ffn.fc2", relu(detail::apply_linear(p, pre + ".ffn.fc1", tgt)));
    tgt = detail::apply_norm(p, pre + ".ffn.norm", add(tgt, ffn));

    auto kfeat = gather_rows(tgt, kpt_tokens);
    if (l == 0) {
      auto delta = detail::apply_linear(p, pre + ".prepose.fc2", relu(detail::apply_linear(p, pre + ".prepose.fc1", kfeat)));
      kp = clamp(add(kp, delta), T(0), T(1));
    }
    auto bins = detail::apply_linear(p, pre + ".fdr", kfeat);
    kp = fdr_refine(bins, kp, range);
    range /= T(2);

    auto logits = detail::apply_linear(p, pre + ".cls", gather_rows(tgt, inst_tokens));
    auto refined = pose_lqe(p, pre + ".lqe", kp, highest, logits, cfg.k_lqe, k);
    out.push_back({k, queries.num_dn, kp, logits, refined, bins});
  }
  return out;
}

// Full pass for one image: encoder, query selection, optional denoising
// queries, decoder.
template <typename T>
struct ForwardOutput {
  FeaturePyramid<T> pyramid;
  QuerySet<T> queries;
  LayerPrediction<T> selection;  // query-selection stage, matching instances only
  std::vector<LayerPrediction<T>> layers;
};

template <typename T>
ForwardOutput<T> model_forward(const ParamStore<T>& p, const ModelConfig& cfg, const Tensor<T>& image,
                               const DnLayout& layout, const std::vector<NoisySample>& dn_samples) {
  if (dn_samples.size() != layout.total_dn_queries())
    throw DimensionError("model_forward: denoising sample count does not match layout");
  ForwardOutput<T> out;
  out.pyramid = encode_stub(p, cfg, image);
  auto matching = select_queries(p, cfg, out.pyramid);
  const std::size_t n = cfg.num_queries;
  auto logits = reshape(matching.selection_logits, {n, 1});
  out.selection = {cfg.num_keypoints, 0, matching.keypoints, logits, logits, Tensor<T>()};
  out.queries = add_denoising_queries(p, matching, dn_samples);
  out.layers = decoder_forward(p, cfg, out.pyramid, out.queries, build_attention_mask(layout, n));
  return out;
}

}  // namespace detrpose
