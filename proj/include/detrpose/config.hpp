#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "detrpose/train.hpp"

namespace detrpose {

// Run settings read from a plain `key = value` file. Lines starting with
// '#' or ';' are comments.
struct RunConfig {
  TrainConfig train;
  std::size_t img_size = 160;
  std::string data_dir;
  std::string val_dir;
  std::string checkpoint = "model.ntc";
  std::string trace = "trace.jsonl";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("value of '" + key + "' is not a number: " + v);
  }
  if (used != v.size()) throw ConfigError("value of '" + key + "' is not a number: " + v);
  if (!std::isfinite(d)) throw ConfigError("value of '" + key + "' is not finite: " + v);
  return d;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const double d = parse_number(key, v);
  if (d < 0 || d != std::floor(d) || d > 1e15) throw ConfigError("value of '" + key + "' must be a non-negative integer");
  return static_cast<std::size_t>(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("value of '" + key + "' is not a boolean: " + v);
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number(key, trim(item)));
  if (out.empty()) throw ConfigError("value of '" + key + "' is empty");
  return out;
}

}  // namespace detail

inline std::map<std::string, std::string> parse_key_values(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    const auto key = detail::trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(n) + ": empty key");
    if (!kv.emplace(key, detail::trim(t.substr(eq + 1))).second)
      throw ConfigError("line " + std::to_string(n) + ": duplicate key '" + key + "'");
  }
  return kv;
}

inline RunConfig parse_run_config(std::istream& is) {
  auto kv = parse_key_values(is);
  for (const char* required : {"preset", "seed"})
    if (!kv.count(required)) throw ConfigError(std::string("missing required key '") + required + "'");

  RunConfig rc;
  auto& tc = rc.train;
  tc.model = ModelConfig::from_preset(kv.at("preset"));
  kv.erase("preset");
  std::vector<double> kappa;

  using detail::parse_bool;
  using detail::parse_count;
  using detail::parse_number;
  const std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters = {
      {"seed", [&](auto& k, auto& v) { tc.seed = parse_count(k, v); }},
      {"hidden", [&](auto& k, auto& v) { tc.model.hidden = parse_count(k, v); }},
      {"heads", [&](auto& k, auto& v) { tc.model.heads = parse_count(k, v); }},
      {"decoder_layers", [&](auto& k, auto& v) { tc.model.decoder_layers = parse_count(k, v); }},
      {"ffn_dim", [&](auto& k, auto& v) { tc.model.ffn_dim = parse_count(k, v); }},
      {"num_queries", [&](auto& k, auto& v) { tc.model.num_queries = parse_count(k, v); }},
      {"num_keypoints", [&](auto& k, auto& v) { tc.model.num_keypoints = parse_count(k, v); }},
      {"k_lqe", [&](auto& k, auto& v) { tc.model.k_lqe = parse_count(k, v); }},
      {"fdr_bins", [&](auto& k, auto& v) { tc.model.fdr_bins = parse_count(k, v); }},
      {"fdr_range", [&](auto& k, auto& v) { tc.model.fdr_range = parse_number(k, v); }},
      {"kappa", [&](auto& k, auto& v) { kappa = detail::parse_list(k, v); }},
      {"w_cls", [&](auto& k, auto& v) { tc.loss.weights.cls = parse_number(k, v); }},
      {"w_l1", [&](auto& k, auto& v) { tc.loss.weights.l1 = parse_number(k, v); }},
      {"w_oks", [&](auto& k, auto& v) { tc.loss.weights.oks = parse_number(k, v); }},
      {"vf_alpha", [&](auto& k, auto& v) { tc.loss.vf.alpha = parse_number(k, v); }},
      {"vf_gamma", [&](auto& k, auto& v) { tc.loss.vf.gamma = parse_number(k, v); }},
      {"lr", [&](auto& k, auto& v) { tc.optim.lr = parse_number(k, v); }},
      {"weight_decay", [&](auto& k, auto& v) { tc.optim.weight_decay = parse_number(k, v); }},
      {"beta1", [&](auto& k, auto& v) { tc.optim.beta1 = parse_number(k, v); }},
      {"beta2", [&](auto& k, auto& v) { tc.optim.beta2 = parse_number(k, v); }},
      {"grad_clip", [&](auto& k, auto& v) { tc.optim.grad_clip = parse_number(k, v); }},
      {"iterations", [&](auto& k, auto& v) { tc.iterations = parse_count(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { tc.batch_size = parse_count(k, v); }},
      {"denoising", [&](auto& k, auto& v) { tc.denoising = parse_bool(k, v); }},
      {"dn_groups", [&](auto& k, auto& v) { tc.dn_groups = parse_count(k, v); }},
      {"eval_every", [&](auto& k, auto& v) { tc.eval_every = parse_count(k, v); }},
      {"stop_ap50", [&](auto& k, auto& v) { tc.stop_ap50 = parse_number(k, v); }},
      {"img_size", [&](auto& k, auto& v) { rc.img_size = parse_count(k, v); }},
      {"data", [&](auto&, auto& v) { rc.data_dir = v; }},
      {"val_data", [&](auto&, auto& v) { rc.val_dir = v; }},
      {"checkpoint", [&](auto&, auto& v) { rc.checkpoint = v; }},
      {"trace", [&](auto&, auto& v) { rc.trace = v; }},
  };
  for (const auto& [key, value] : kv) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown key '" + key + "'");
    it->second(key, value);
  }

  const std::size_t k = tc.model.num_keypoints;
  if (kappa.empty()) tc.loss.ks = KsParams::uniform(k);
  else if (kappa.size() == 1) tc.loss.ks = KsParams::uniform(k, kappa[0]);
  else if (kappa.size() == k) tc.loss.ks = KsParams{kappa};
  else throw ConfigError("kappa needs 1 or " + std::to_string(k) + " entries");
  tc.model.validate();
  try {
    tc.loss.ks.validate();
    tc.loss.vf.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (tc.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(tc.optim.lr > 0.0)) throw ConfigError("lr must be positive");
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return parse_run_config(is);
}

// Default training settings for a preset with a uniform kappa.
inline TrainConfig default_train_config(const std::string& preset = "tiny") {
  TrainConfig tc;
  tc.model = ModelConfig::from_preset(preset);
  tc.loss.ks = KsParams::uniform(tc.model.num_keypoints);
  return tc;
}

}  // namespace detrpose
