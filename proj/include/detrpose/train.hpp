#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "detrpose/data.hpp"
#include "detrpose/losses.hpp"
#include "detrpose/model.hpp"

namespace detrpose {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;  // global norm, <= 0 disables
};

// Decoupled weight decay Adam over a ParamStore.
template <typename T>
class AdamW {
 public:
  AdamW(const ParamStore<T>& params, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& t : params.tensors()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  // Returns the gradient norm before clipping.
  double step(ParamStore<T>& params) {
    auto& ts = params.tensors();
    double norm2 = 0.0;
    for (const auto& t : ts)
      for (T g : t.grad()) norm2 += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(norm2);
    const double clip = cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto g = ts[i].grad();
      if (g.empty()) continue;
      auto w = ts[i].mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        double wj = static_cast<double>(w[j]) * (1.0 - cfg_.lr * cfg_.weight_decay);
        wj -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        w[j] = static_cast<T>(wj);
      }
    }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  AdamWConfig optim;
  std::size_t iterations = 300;
  std::size_t batch_size = 4;
  bool denoising = true;
  std::size_t dn_groups = 2;
  std::size_t eval_every = 0;  // 0: evaluate only at the end
  double stop_ap50 = -1.0;     // stop once a periodic eval reaches this AP50
  std::uint64_t seed = 0;
};

struct TraceRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::vector<StageLoss> stages;  // batch means
  std::optional<ApReport> eval;
};

inline nlohmann::json to_json(const TraceRecord& r) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : r.stages)
    stages.push_back({{"ksvf", s.ksvf},
                      {"keypoint_l1", s.keypoint_l1},
                      {"oks_term", s.oks_term},
                      {"dn_ksvf", s.dn_ksvf},
                      {"dn_keypoint_l1", s.dn_keypoint_l1},
                      {"dn_oks_term", s.dn_oks_term}});
  nlohmann::json j = {{"iteration", r.iteration}, {"loss", r.loss}, {"grad_norm", r.grad_norm}, {"stages", stages}};
  if (r.eval) j["eval"] = to_json(*r.eval);
  return j;
}

struct TrainResult {
  ParamStore<float> params;
  std::vector<TraceRecord> trace;
};

inline std::vector<PersonInstance> normalized_instances(const Annotation& a) {
  std::vector<PersonInstance> out;
  for (const auto& p : a.instances)
    out.push_back(normalize_instance(p, static_cast<double>(a.width), static_cast<double>(a.height)));
  return out;
}

struct Prediction {
  std::vector<ScoredInstance> instances;  // pixel coordinates, all N queries
  std::vector<double> logits;             // classification head of the last layer
  std::vector<double> refined_logits;     // after Pose-LQE
};

// Inference without denoising queries. Scores come from the last layer's
// refined logits, or the plain logits when use_lqe is false.
template <typename T>
Prediction predict(const ParamStore<T>& params, const ModelConfig& cfg, const Scene& scene, bool use_lqe = true) {
  NoGradGuard guard;
  const auto image = cast<T>(scene.image);
  const auto out = model_forward(params, cfg, image, DnLayout{}, {});
  const auto& last = out.layers.back();
  const double s = static_cast<double>(std::max(scene.annotation.width, scene.annotation.height));
  const std::size_t n = last.num_instances(), k = last.num_keypoints;
  Prediction p;
  for (std::size_t i = 0; i < n; ++i) {
    p.logits.push_back(static_cast<double>(last.logits[i]));
    p.refined_logits.push_back(static_cast<double>(last.refined_logits[i]));
    ScoredInstance si;
    for (std::size_t j = 0; j < k; ++j)
      si.instance.keypoints.push_back({static_cast<double>(last.keypoints[(i * k + j) * 2]) * s,
                                       static_cast<double>(last.keypoints[(i * k + j) * 2 + 1]) * s, true});
    const double logit = use_lqe ? p.refined_logits.back() : p.logits.back();
    si.score = 1.0 / (1.0 + std::exp(-logit));
    p.instances.push_back(std::move(si));
  }
  return p;
}

template <typename T>
ApReport evaluate(const ParamStore<T>& params, const ModelConfig& cfg, const std::vector<Scene>& scenes,
                  const KsParams& ks, bool use_lqe = true) {
  std::vector<std::vector<ScoredInstance>> preds;
  std::vector<Annotation> gts;
  for (const auto& s : scenes) {
    preds.push_back(predict(params, cfg, s, use_lqe).instances);
    gts.push_back(s.annotation);
  }
  return eval_ap(preds, gts, ks);
}

// Loss of one scene, with denoising queries drawn from rng when enabled.
template <typename T>
LossBreakdown<T> scene_loss(const ParamStore<T>& params, const TrainConfig& cfg, const Tensor<T>& image,
                            const std::vector<PersonInstance>& gts, Rng& rng) {
  DnLayout layout;
  std::vector<NoisySample> samples;
  if (cfg.denoising && !gts.empty()) {
    const std::size_t g = effective_dn_groups(cfg.dn_groups, gts.size(), cfg.model.num_queries);
    std::tie(layout, samples) = build_dn_layout(gts, g, cfg.loss.ks, rng);
  }
  const auto out = model_forward(params, cfg.model, image, layout, samples);
  std::vector<LayerPrediction<T>> stages{out.selection};
  stages.insert(stages.end(), out.layers.begin(), out.layers.end());
  return total_loss(stages, layout, samples, gts, cfg.loss);
}

namespace detail {

inline std::string non_finite_report(const ParamStore<float>& params, std::size_t iteration, double loss) {
  std::string msg = "non-finite loss " + std::to_string(loss) + " at iteration " + std::to_string(iteration);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.tensors()[i];
    bool bad = false;
    for (float v : t.data()) bad = bad || !std::isfinite(v);
    for (float v : t.grad()) bad = bad || !std::isfinite(v);
    if (bad) msg += "; non-finite values in " + params.names()[i];
  }
  return msg;
}

}  // namespace detail

using TraceSink = std::function<void(const TraceRecord&)>;

// Deterministic given cfg.seed. Throws NumericError on a non-finite loss.
inline TrainResult train_loop(const TrainConfig& cfg, const std::vector<Scene>& train,
                              const std::vector<Scene>& val, ParamStore<float> params,
                              const TraceSink& sink = nullptr) {
  cfg.model.validate();
  cfg.loss.ks.validate();
  cfg.loss.vf.validate();
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  TrainResult result;
  if (cfg.iterations > 0 && train.empty()) throw ArgumentError("train_loop: empty training set");
  AdamW<float> opt(params, cfg.optim);
  Rng order_rng = Rng::stream(cfg.seed, 101);
  Rng dn_rng = Rng::stream(cfg.seed, 202);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  const auto& eval_set = val.empty() ? train : val;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    params.zero_grad();
    std::vector<Tensor<float>> losses;
    std::vector<StageLoss> stage_sum;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order.resize(train.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);
        cursor = 0;
      }
      const auto& scene = train[order[cursor++]];
      LossBreakdown<float> br;
      try {
        br = scene_loss(params, cfg, scene.image, normalized_instances(scene.annotation), dn_rng);
      } catch (const NumericError& e) {
        throw NumericError(detail::non_finite_report(params, it, std::numeric_limits<double>::quiet_NaN()) + " (" +
                           e.what() + ")");
      }
      losses.push_back(br.total_tensor);
      stage_sum.resize(br.stages.size());
      for (std::size_t s = 0; s < br.stages.size(); ++s) {
        const double inv = 1.0 / static_cast<double>(cfg.batch_size);
        stage_sum[s].ksvf += br.stages[s].ksvf * inv;
        stage_sum[s].keypoint_l1 += br.stages[s].keypoint_l1 * inv;
        stage_sum[s].oks_term += br.stages[s].oks_term * inv;
        stage_sum[s].dn_ksvf += br.stages[s].dn_ksvf * inv;
        stage_sum[s].dn_keypoint_l1 += br.stages[s].dn_keypoint_l1 * inv;
        stage_sum[s].dn_oks_term += br.stages[s].dn_oks_term * inv;
      }
    }
    auto total = scale(add_n(losses), 1.0f / static_cast<float>(cfg.batch_size));
    const double loss = total.item();
    if (!std::isfinite(loss)) throw NumericError(detail::non_finite_report(params, it, loss));
    total.backward();
    TraceRecord rec;
    rec.iteration = it;
    rec.loss = loss;
    rec.grad_norm = opt.step(params);
    rec.stages = std::move(stage_sum);
    if (!std::isfinite(rec.grad_norm)) throw NumericError(detail::non_finite_report(params, it, rec.grad_norm));
    const bool last = it + 1 == cfg.iterations;
    if ((cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) || last)
      rec.eval = evaluate(params, cfg.model, eval_set, cfg.loss.ks);
    const bool stop = rec.eval && cfg.stop_ap50 >= 0.0 && rec.eval->ap50 >= cfg.stop_ap50;
    if (sink) sink(rec);
    result.trace.push_back(std::move(rec));
    if (stop) break;
  }
  params.zero_grad();
  result.params = std::move(params);
  return result;
}

inline NamedTensors to_named(const ParamStore<float>& p) {
  NamedTensors out;
  for (std::size_t i = 0; i < p.size(); ++i) out.emplace_back(p.names()[i], p.tensors()[i].detach());
  return out;
}

// Loads checkpoint values into a freshly initialized store of the same
// configuration; names and shapes must match exactly.
inline ParamStore<float> from_named(const NamedTensors& named, const ModelConfig& cfg) {
  auto p = init_params<float>(cfg, 0);
  if (named.size() != p.size()) throw FormatError("checkpoint has " + std::to_string(named.size()) +
                                                  " tensors, model expects " + std::to_string(p.size()));
  for (const auto& [name, t] : named) {
    if (!p.contains(name)) throw FormatError("checkpoint tensor not in model: " + name);
    auto& dst = p.at(name);
    if (dst.shape() != t.shape()) throw FormatError("shape mismatch for " + name);
    std::copy(t.data().begin(), t.data().end(), dst.mutable_data().begin());
  }
  return p;
}

}  // namespace detrpose
