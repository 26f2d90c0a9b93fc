#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "detrpose/config.hpp"
#include "detrpose/diagnostics.hpp"

using namespace detrpose;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

struct GenDataArgs {
  std::string out;
  std::size_t num = 0;
  std::uint64_t seed = 0;
  std::size_t img_size = 160;
  std::size_t max_persons = 4;
  std::size_t keypoints = 5;
};

int cmd_gen_data(const GenDataArgs& a) {
  SceneSpec spec;
  spec.img_size = a.img_size;
  spec.max_persons = a.max_persons;
  spec.skeleton = Skeleton::for_keypoints(a.keypoints);
  spec.seed = a.seed;
  save_dataset(a.out, gen_dataset(spec, a.num));
  std::cout << a.num << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, data, val, checkpoint, trace;
  long iterations = -1;
};

int cmd_train(const TrainArgs& a) {
  auto rc = load_run_config(a.config);
  if (!a.data.empty()) rc.data_dir = a.data;
  if (!a.val.empty()) rc.val_dir = a.val;
  if (!a.checkpoint.empty()) rc.checkpoint = a.checkpoint;
  if (!a.trace.empty()) rc.trace = a.trace;
  if (a.iterations >= 0) rc.train.iterations = static_cast<std::size_t>(a.iterations);
  if (rc.data_dir.empty()) throw ConfigError("missing required key 'data'");
  const auto train = load_dataset(rc.data_dir);
  const auto val = rc.val_dir.empty() ? std::vector<Scene>{} : load_dataset(rc.val_dir);

  std::ofstream trace(rc.trace);
  if (!trace) throw FormatError("cannot open " + rc.trace + " for writing");
  auto result = train_loop(rc.train, train, val, init_params<float>(rc.train.model, rc.train.seed),
                           [&](const TraceRecord& r) {
                             trace << to_json(r).dump() << '\n';
                             if (r.eval)
                               std::fprintf(stderr, "iter %6zu  loss %9.4f  AP %.3f  AP50 %.3f\n", r.iteration, r.loss,
                                            r.eval->ap, r.eval->ap50);
                           });
  save_checkpoint(rc.checkpoint, to_named(result.params));
  json summary = {{"iterations", result.trace.size()}, {"checkpoint", rc.checkpoint}, {"trace", rc.trace}};
  if (!result.trace.empty()) {
    summary["final_loss"] = result.trace.back().loss;
    if (result.trace.back().eval) summary["eval"] = to_json(*result.trace.back().eval);
  }
  std::cout << summary.dump() << "\n";
  return kOk;
}

struct EvalArgs {
  std::string config, data, checkpoint;
  bool no_lqe = false;
};

int cmd_eval(const EvalArgs& a) {
  auto rc = load_run_config(a.config);
  if (!a.data.empty()) rc.data_dir = a.data;
  if (!a.checkpoint.empty()) rc.checkpoint = a.checkpoint;
  if (rc.data_dir.empty()) throw ConfigError("missing required key 'data'");
  const auto params = from_named(load_checkpoint(rc.checkpoint), rc.train.model);
  const auto scenes = load_dataset(rc.data_dir);
  const auto report = evaluate(params, rc.train.model, scenes, rc.train.loss.ks, !a.no_lqe);
  std::fprintf(stderr, "AP %.4f  AP50 %.4f  AP75 %.4f  AR %.4f  (%zu images)\n", report.ap, report.ap50, report.ap75,
               report.ar, scenes.size());
  std::cout << to_json(report).dump() << "\n";
  return kOk;
}

struct DnSampleArgs {
  std::string config, data, polarity = "both";
  std::size_t count = 1;
};

int cmd_dn_sample(const DnSampleArgs& a) {
  auto rc = load_run_config(a.config);
  if (!a.data.empty()) rc.data_dir = a.data;
  std::vector<Polarity> pols;
  if (a.polarity == "pos" || a.polarity == "both") pols.push_back(Polarity::Positive);
  if (a.polarity == "neg" || a.polarity == "both") pols.push_back(Polarity::Negative);
  if (pols.empty()) throw ConfigError("--polarity must be pos, neg or both");

  Annotation ann;
  if (!rc.data_dir.empty()) {
    const auto anns = read_annotations(rc.data_dir + "/annotations.jsonl");
    if (anns.empty()) throw ConfigError(rc.data_dir + " has no annotations");
    ann = anns.front();
  } else {
    SceneSpec spec;
    spec.img_size = rc.img_size;
    spec.skeleton = Skeleton::for_keypoints(rc.train.model.num_keypoints);
    spec.seed = rc.train.seed;
    Rng rng = Rng::stream(spec.seed, 0);
    ann = gen_scene(spec, rng).annotation;
  }
  const auto gts = normalized_instances(ann);
  const auto& ks = rc.train.loss.ks;
  Rng rng = Rng::stream(rc.train.seed, 303);
  json out = json::array();
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (Polarity p : pols)
      for (std::size_t c = 0; c < a.count; ++c) {
        auto s = gen_pose_queries(gts[g], p, ks, rng);
        const double scale = std::sqrt(gts[g].area);
        json kps = json::array(), recomputed = json::array();
        for (std::size_t j = 0; j < s.instance.keypoints.size(); ++j) {
          const auto& k = s.instance.keypoints[j];
          const auto& t = gts[g].keypoints[j];
          kps.push_back({k.x, k.y});
          if (s.clamped[j])
            recomputed.push_back(nullptr);
          else
            recomputed.push_back(keypoint_similarity(std::hypot(k.x - t.x, k.y - t.y), scale, ks.kappa[j]));
        }
        out.push_back({{"gt", g},
                       {"polarity", to_string(p)},
                       {"keypoints", kps},
                       {"sampled_ks", s.sampled_ks},
                       {"recomputed_ks", recomputed},
                       {"clamped", s.clamped},
                       {"target_quality", s.target_quality(gts[g])}});
      }
  std::cout << out.dump() << "\n";
  return kOk;
}

struct GradCheckArgs {
  std::string config;
  std::size_t samples = 8;
  double eps = 1e-6;
  double tolerance = 1e-3;
};

int cmd_grad_check(const GradCheckArgs& a) {
  const auto rc = load_run_config(a.config);
  GradCheckOptions opt;
  opt.samples_per_block = a.samples;
  opt.eps = a.eps;
  opt.seed = rc.train.seed;
  const auto blocks = check_model_gradients(rc.train, opt);
  double worst = 0.0;
  json jb = json::array();
  for (const auto& b : blocks) {
    worst = std::max(worst, b.worst);
    jb.push_back({{"name", b.name}, {"worst", b.worst}, {"checked", b.checked}});
    std::fprintf(stderr, "%-32s %10.3e\n", b.name.c_str(), b.worst);
  }
  const bool ok = worst <= a.tolerance;
  std::fprintf(stderr, "worst relative error %.3e (%s)\n", worst, ok ? "ok" : "exceeds tolerance");
  std::cout << json{{"worst", worst}, {"tolerance", a.tolerance}, {"blocks", jb}}.dump() << "\n";
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale keypoint denoising pose transformer"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--num", gen.num, "Number of scenes")->required();
  gen_cmd->add_option("--seed", gen.seed, "Seed")->required();
  gen_cmd->add_option("--img-size", gen.img_size, "Square image side in pixels");
  gen_cmd->add_option("--max-persons", gen.max_persons, "Maximum figures per scene");
  gen_cmd->add_option("--keypoints", gen.keypoints, "Skeleton size (5 or 17)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train and write a checkpoint plus metric trace");
  train_cmd->add_option("--config", tr.config, "Config file")->required();
  train_cmd->add_option("--data", tr.data, "Training dataset directory");
  train_cmd->add_option("--val", tr.val, "Held-out dataset directory");
  train_cmd->add_option("--checkpoint", tr.checkpoint, "Output checkpoint path");
  train_cmd->add_option("--trace", tr.trace, "Output metric trace path");
  train_cmd->add_option("--iterations", tr.iterations, "Override iteration count");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Print OKS AP of a checkpoint as JSON");
  eval_cmd->add_option("--config", ev.config, "Config file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint path");
  eval_cmd->add_flag("--no-lqe", ev.no_lqe, "Score with the classification logits only");

  DnSampleArgs dn;
  auto* dn_cmd = app.add_subcommand("dn-sample", "Print denoising pose samples as JSON");
  dn_cmd->add_option("--config", dn.config, "Config file")->required();
  dn_cmd->add_option("--data", dn.data, "Dataset directory (first scene is used)");
  dn_cmd->add_option("--polarity", dn.polarity, "pos, neg or both")->check(CLI::IsMember({"pos", "neg", "both"}));
  dn_cmd->add_option("--count", dn.count, "Samples per ground truth and polarity");

  GradCheckArgs gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Compare reverse mode with central differences");
  gc_cmd->add_option("--config", gc.config, "Config file")->required();
  gc_cmd->add_option("--samples", gc.samples, "Entries checked per parameter block");
  gc_cmd->add_option("--eps", gc.eps, "Finite-difference step");
  gc_cmd->add_option("--tolerance", gc.tolerance, "Largest accepted relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*dn_cmd) return cmd_dn_sample(dn);
    if (*gc_cmd) return cmd_grad_check(gc);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
