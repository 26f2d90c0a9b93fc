#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <limits>
#include <sstream>

#include "detrpose/config.hpp"
#include "detrpose/train.hpp"

using namespace detrpose;

namespace {

std::vector<Scene> small_scenes(std::size_t n, std::uint64_t seed, std::size_t img = 64) {
  SceneSpec spec;
  spec.img_size = img;
  spec.max_persons = 2;
  spec.seed = seed;
  return gen_dataset(spec, n);
}

bool same_values(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.tensors()[i].data(), y = b.tensors()[i].data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

RunConfig parse(const std::string& text) {
  std::stringstream ss(text);
  return parse_run_config(ss);
}

}  // namespace

TEST(AdamW, SingleStepMovesAgainstGradient) {
  ParamStore<float> p;
  p.add("w", Tensor<float>({2}, {1.0f, -1.0f}, true));
  auto loss = sum(mul(p["w"], p["w"]));
  loss.backward();
  AdamWConfig cfg;
  cfg.grad_clip = 0.0;
  cfg.weight_decay = 0.0;
  AdamW<float> opt(p, cfg);
  EXPECT_NEAR(opt.step(p), std::sqrt(8.0), 1e-6);
  // first bias-corrected step has magnitude lr
  EXPECT_NEAR(p["w"].data()[0], 1.0 - 1e-3, 1e-6);
  EXPECT_NEAR(p["w"].data()[1], -1.0 + 1e-3, 1e-6);
}

TEST(AdamW, DecoupledWeightDecayWithoutGradient) {
  ParamStore<float> p;
  p.add("w", Tensor<float>({1}, {2.0f}, true));
  auto loss = scale(sum(p["w"]), 0.0f);
  loss.backward();
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamW<float> opt(p, cfg);
  opt.step(p);
  EXPECT_NEAR(p["w"].data()[0], 2.0 * (1.0 - 0.05), 1e-6);
}

TEST(TrainLoop, ZeroIterationsReturnsInitialWeights) {
  auto cfg = default_train_config();
  cfg.iterations = 0;
  const auto init = init_params<float>(cfg.model, 4);
  const auto r = train_loop(cfg, small_scenes(2, 1), {}, init.clone());
  EXPECT_TRUE(r.trace.empty());
  EXPECT_TRUE(same_values(r.params, init));
}

TEST(TrainLoop, SameSeedGivesIdenticalTrace) {
  auto cfg = default_train_config();
  cfg.iterations = 4;
  cfg.batch_size = 2;
  cfg.eval_every = 2;
  cfg.seed = 9;
  const auto scenes = small_scenes(3, 2);
  const auto init = init_params<float>(cfg.model, 1);
  const auto a = train_loop(cfg, scenes, {}, init.clone());
  const auto b = train_loop(cfg, scenes, {}, init.clone());
  ASSERT_EQ(a.trace.size(), 4u);
  ASSERT_EQ(b.trace.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(to_json(a.trace[i]).dump(), to_json(b.trace[i]).dump());
  EXPECT_TRUE(a.trace[1].eval.has_value());
  EXPECT_FALSE(a.trace[2].eval.has_value());
  EXPECT_TRUE(same_values(a.params, b.params));
}

TEST(TrainLoop, TraceRecordsAllLossFields) {
  auto cfg = default_train_config();
  cfg.iterations = 1;
  cfg.batch_size = 1;
  const auto r = train_loop(cfg, small_scenes(1, 3), {}, init_params<float>(cfg.model, 0));
  const auto j = to_json(r.trace[0]);
  EXPECT_EQ(j["stages"].size(), cfg.model.decoder_layers + 1);
  for (const char* key : {"ksvf", "keypoint_l1", "oks_term", "dn_ksvf", "dn_keypoint_l1", "dn_oks_term"})
    EXPECT_TRUE(j["stages"][0].contains(key)) << key;
  for (const char* key : {"AP", "AP50", "AP75", "AR"}) EXPECT_TRUE(j["eval"].contains(key)) << key;
}

TEST(TrainLoop, NonFiniteParameterAborts) {
  auto cfg = default_train_config();
  cfg.iterations = 1;
  cfg.batch_size = 1;
  auto p = init_params<float>(cfg.model, 0);
  p.at("query.content").mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train_loop(cfg, small_scenes(1, 4), {}, std::move(p));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("query.content"), std::string::npos);
  }
}

TEST(TrainLoop, LossDropsOverHundredIterations) {
  const auto scenes = small_scenes(8, 100, 160);
  std::vector<double> drop;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto cfg = default_train_config();
    cfg.iterations = 101;
    cfg.seed = seed;
    const auto r = train_loop(cfg, scenes, {}, init_params<float>(cfg.model, seed));
    drop.push_back(r.trace.front().loss - r.trace.back().loss);
  }
  std::sort(drop.begin(), drop.end());
  EXPECT_GT(drop[1], 0.0);
}

TEST(Checkpoint, NamedParamsRoundtrip) {
  const auto cfg = ModelConfig::from_preset("tiny");
  const auto p = init_params<float>(cfg, 6);
  std::stringstream ss;
  save_checkpoint(ss, to_named(p));
  EXPECT_TRUE(same_values(from_named(load_checkpoint(ss), cfg), p));
  auto named = to_named(p);
  named.pop_back();
  EXPECT_THROW(from_named(named, cfg), FormatError);
}

TEST(RunConfigParse, MinimalConfigUsesDefaults) {
  const auto rc = parse("preset = tiny\nseed = 3\n# comment\n; other comment\n\n");
  EXPECT_EQ(rc.train.seed, 3u);
  EXPECT_EQ(rc.train.model.hidden, 32u);
  EXPECT_EQ(rc.train.loss.ks.kappa.size(), 5u);
  EXPECT_EQ(rc.img_size, 160u);
}

TEST(RunConfigParse, OverridesApply) {
  const auto rc = parse("preset=tiny\nseed=1\nnum_queries=8\nkappa=0.1,0.2,0.3,0.4,0.5\ndenoising=false\nlr=5e-4\n");
  EXPECT_EQ(rc.train.model.num_queries, 8u);
  EXPECT_DOUBLE_EQ(rc.train.loss.ks.kappa[4], 0.5);
  EXPECT_FALSE(rc.train.denoising);
  EXPECT_DOUBLE_EQ(rc.train.optim.lr, 5e-4);
}

TEST(RunConfigParse, MissingKeyIsNamed) {
  try {
    parse("preset = tiny\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
  }
}

TEST(RunConfigParse, RejectsBadInput) {
  EXPECT_THROW(parse("preset=tiny\nseed=1\nlearning_rate=1\n"), ConfigError);
  EXPECT_THROW(parse("preset=tiny\nseed=1\nseed=2\n"), ConfigError);
  EXPECT_THROW(parse("preset=tiny\nseed=1\nlr=nan\n"), ConfigError);
  EXPECT_THROW(parse("preset=tiny\nseed=1\nw_l1=inf\n"), ConfigError);
  EXPECT_THROW(parse("preset=tiny\nseed=1\nkappa=0.1,0.2\n"), ConfigError);
  EXPECT_THROW(parse("preset=tiny\nseed=1\nnum_queries=0\n"), ConfigError);
  EXPECT_THROW(parse("preset=tiny\nseed=-1\n"), ConfigError);
  EXPECT_THROW(parse("preset=huge\nseed=1\n"), ConfigError);
  EXPECT_THROW(parse("preset=tiny\nseed 1\n"), ConfigError);
}
