#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "detrpose/gradcheck.hpp"
#include "detrpose/train.hpp"

namespace detrpose {

struct BlockError {
  std::string name;
  double worst = 0.0;
  std::size_t checked = 0;
};

struct GradCheckOptions {
  std::size_t img_size = 64;
  std::size_t max_persons = 2;
  std::size_t samples_per_block = 4;
  double eps = 1e-6;
  double floor = 1e-3;
  double init_noise = 0.05;  // added to every parameter so zero-initialized heads carry gradient
  std::uint64_t seed = 0;
};

// Central differences against reverse mode on the full training loss
// (query selection, every decoder layer, denoising queries), in double.
inline std::vector<BlockError> check_model_gradients(const TrainConfig& cfg, const GradCheckOptions& opt) {
  if (!(opt.eps > 0.0)) throw ArgumentError("grad check eps must be positive");
  auto params = init_params<float>(cfg.model, opt.seed).clone<double>();
  Rng rng = Rng::stream(opt.seed, 7);
  for (auto& t : params.tensors())
    for (auto& v : t.mutable_data()) v += opt.init_noise * rng.normal();

  SceneSpec spec;
  spec.img_size = opt.img_size;
  spec.max_persons = opt.max_persons;
  spec.skeleton = Skeleton::for_keypoints(cfg.model.num_keypoints);
  spec.seed = opt.seed;
  Rng scene_rng = Rng::stream(opt.seed, 0);
  const auto scene = gen_scene(spec, scene_rng);
  const auto image = cast<double>(scene.image);
  const auto gts = normalized_instances(scene.annotation);

  DnLayout layout;
  std::vector<NoisySample> samples;
  if (cfg.denoising) {
    Rng dn_rng = Rng::stream(opt.seed, 3);
    const std::size_t g = effective_dn_groups(cfg.dn_groups, gts.size(), cfg.model.num_queries);
    std::tie(layout, samples) = build_dn_layout(gts, g, cfg.loss.ks, dn_rng);
  }
  std::vector<StageTargets> targets;
  auto loss = [&]() {
    const auto out = model_forward(params, cfg.model, image, layout, samples);
    std::vector<LayerPrediction<double>> stages{out.selection};
    stages.insert(stages.end(), out.layers.begin(), out.layers.end());
    return total_loss(stages, layout, samples, gts, cfg.loss, &targets).total_tensor;
  };

  params.zero_grad();
  const auto total = loss();
  if (!std::isfinite(total.item())) throw NumericError("grad check: non-finite loss");
  total.backward();

  std::vector<BlockError> out;
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto& t = params.tensors()[b];
    std::vector<double> analytic(t.size(), 0.0);
    const auto g = t.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(opt.samples_per_block, t.size()); ++i) idx.push_back(rng.index(t.size()));
    BlockError e{params.names()[b], 0.0, idx.size()};
    for (std::size_t i : idx) {
      auto w = t.mutable_data();
      const double orig = w[i];
      double up = 0.0, down = 0.0;
      {
        NoGradGuard guard;
        w[i] = orig + opt.eps;
        up = loss().item();
        w[i] = orig - opt.eps;
        down = loss().item();
        w[i] = orig;
      }
      const double fd = (up - down) / (2.0 * opt.eps);
      if (!std::isfinite(fd)) throw NumericError("grad check: non-finite difference in " + e.name);
      e.worst = std::max(e.worst, relative_error(analytic[i], fd, opt.floor));
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace detrpose
