#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "splitscene/feature_field.hpp"
#include "splitscene/io.hpp"
#include "splitscene/orchestrator.hpp"
#include "splitscene/refine.hpp"
#include "splitscene/tracker.hpp"

namespace splitscene {

namespace fs = std::filesystem;

struct CompletionSettings {
  CompletionConfig run;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int steps = 50;
  std::string denoiser = "mock";  // "mock" or a command line speaking the tensor protocol
  RefineConfig refine{100, 0.02, false, 1e-3, 10};
  double source_weight = 1.0;
  double generated_weight = 0.5;
};

struct PipelineConfig {
  fs::path scene, cameras, masks, images, output;
  std::uint64_t seed = 42;
  ClusterConfig clustering;
  TrainingConfig training;
  CompletionSettings completion;
  boost::property_tree::ptree tree;  // effective settings after overrides

  io::ScenePaths scene_paths() const { return {scene, cameras, masks, images}; }
};

namespace detail {

inline const std::map<std::string, std::set<std::string>>& config_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"", {"seed"}},
      {"paths", {"scene", "cameras", "masks", "images", "output"}},
      {"clustering",
       {"membership_transmittance", "visible_ratio", "contain_ratio", "merge_threshold", "underseg_intersect",
        "underseg_consistency", "dbscan_eps_scale", "dbscan_min_points", "floater_min_fraction"}},
      {"training",
       {"lambda1", "lambda2", "lambda3", "window_k", "temperature", "samples_per_mask", "lr", "iters", "tau_seg",
        "mean_mode"}},
      {"completion",
       {"steps", "beta_start", "beta_end", "threshold", "min_conditions", "mode", "denoiser", "view_size", "refine_iters",
        "refine_lr", "refine_positions", "source_weight", "generated_weight"}},
  };
  return keys;
}

inline std::string unquote(std::string v) {
  const auto b = v.find_first_not_of(" \t");
  const auto e = v.find_last_not_of(" \t");
  v = b == std::string::npos ? "" : v.substr(b, e - b + 1);
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) v = v.substr(1, v.size() - 2);
  return v;
}

template <class T>
T get_value(const boost::property_tree::ptree& t, const std::string& key, T fallback) {
  const auto v = t.get_optional<std::string>(key);
  if (!v) return fallback;
  const std::string s = unquote(*v);
  std::istringstream in(s);
  T out{};
  if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw InputError("config key " + key + ": expected true or false, got '" + s + "'");
  } else {
    in >> out;
    if (in.fail() || !in.eof()) throw InputError("config key " + key + ": cannot parse '" + s + "'");
  }
  return out;
}

inline std::string get_string(const boost::property_tree::ptree& t, const std::string& key, const std::string& fallback) {
  const auto v = t.get_optional<std::string>(key);
  return v ? unquote(*v) : fallback;
}

}  // namespace detail

/// Parses `[section]` / `key = value` text. Overrides are "section.key=value" (or "seed=...").
inline PipelineConfig parse_config(const std::string& text, const fs::path& base_dir,
                                   const std::vector<std::string>& overrides = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw InputError("override '" + o + "' is not key=value");
    tree.put(detail::unquote(o.substr(0, eq)), detail::unquote(o.substr(eq + 1)));
  }
  const auto& keys = detail::config_keys();
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      if (!keys.at("").count(name)) throw InputError("unknown config key '" + name + "'");
      continue;
    }
    const auto sec = keys.find(name);
    if (sec == keys.end()) throw InputError("unknown config section [" + name + "]");
    for (const auto& [k, v] : node)
      if (!sec->second.count(k)) throw InputError("unknown config key '" + name + "." + k + "'");
  }

  PipelineConfig c;
  c.tree = tree;
  auto path = [&](const std::string& key) -> fs::path {
    const std::string v = detail::get_string(tree, "paths." + key, "");
    if (v.empty()) return {};
    const fs::path p(v);
    return p.is_absolute() ? p : base_dir / p;
  };
  c.scene = path("scene");
  c.cameras = path("cameras");
  c.masks = path("masks");
  c.images = path("images");
  c.output = path("output");
  if (c.output.empty()) c.output = base_dir / "out";
  c.seed = detail::get_value<std::uint64_t>(tree, "seed", 42);

  auto& k = c.clustering;
  k.membership_transmittance = detail::get_value(tree, "clustering.membership_transmittance", k.membership_transmittance);
  k.visible_ratio = detail::get_value(tree, "clustering.visible_ratio", k.visible_ratio);
  k.contain_ratio = detail::get_value(tree, "clustering.contain_ratio", k.contain_ratio);
  k.merge_threshold = detail::get_value(tree, "clustering.merge_threshold", k.merge_threshold);
  k.underseg_intersect = detail::get_value(tree, "clustering.underseg_intersect", k.underseg_intersect);
  k.underseg_consistency = detail::get_value(tree, "clustering.underseg_consistency", k.underseg_consistency);
  k.dbscan_eps_scale = detail::get_value(tree, "clustering.dbscan_eps_scale", k.dbscan_eps_scale);
  k.dbscan_min_points = detail::get_value(tree, "clustering.dbscan_min_points", k.dbscan_min_points);
  k.floater_min_fraction = detail::get_value(tree, "clustering.floater_min_fraction", k.floater_min_fraction);

  auto& t = c.training;
  t.lambda1 = detail::get_value(tree, "training.lambda1", t.lambda1);
  t.lambda2 = detail::get_value(tree, "training.lambda2", t.lambda2);
  t.lambda3 = detail::get_value(tree, "training.lambda3", t.lambda3);
  t.window_k = detail::get_value(tree, "training.window_k", t.window_k);
  t.temperature.value = detail::get_value(tree, "training.temperature", t.temperature.value);
  t.samples_per_mask = detail::get_value(tree, "training.samples_per_mask", t.samples_per_mask);
  t.lr = detail::get_value(tree, "training.lr", t.lr);
  t.iters = detail::get_value(tree, "training.iters", t.iters);
  t.tau_seg = detail::get_value(tree, "training.tau_seg", t.tau_seg);
  const std::string mean_mode = detail::get_string(tree, "training.mean_mode", "batch");
  if (mean_mode == "batch")
    t.mean_mode = MeanMode::BatchLocal;
  else if (mean_mode == "global")
    t.mean_mode = MeanMode::Global;
  else
    throw InputError("training.mean_mode must be batch or global");
  t.seed = c.seed;
  t.validate();

  auto& m = c.completion;
  m.steps = detail::get_value(tree, "completion.steps", m.steps);
  m.beta_start = detail::get_value(tree, "completion.beta_start", m.beta_start);
  m.beta_end = detail::get_value(tree, "completion.beta_end", m.beta_end);
  m.run.schedule = NoiseSchedule::linear(m.steps, m.beta_start, m.beta_end);
  m.run.threshold = detail::get_value(tree, "completion.threshold", m.run.threshold);
  m.run.min_conditions = detail::get_value(tree, "completion.min_conditions", m.run.min_conditions);
  const std::string mode = detail::get_string(tree, "completion.mode", "average");
  if (mode == "average")
    m.run.mode = ConditionMode::Average;
  else if (mode == "round_robin")
    m.run.mode = ConditionMode::RoundRobin;
  else
    throw InputError("completion.mode must be average or round_robin");
  m.denoiser = detail::get_string(tree, "completion.denoiser", m.denoiser);
  const int size = detail::get_value(tree, "completion.view_size", m.run.views.width);
  if (size <= 0 || size % kLatentFactor) throw InputError("completion.view_size must be a positive multiple of 8");
  m.run.views.width = m.run.views.height = size;
  m.refine.iters = detail::get_value(tree, "completion.refine_iters", m.refine.iters);
  m.refine.lr = detail::get_value(tree, "completion.refine_lr", m.refine.lr);
  m.refine.optimize_positions = detail::get_value(tree, "completion.refine_positions", m.refine.optimize_positions);
  m.source_weight = detail::get_value(tree, "completion.source_weight", m.source_weight);
  m.generated_weight = detail::get_value(tree, "completion.generated_weight", m.generated_weight);
  m.run.seed = c.seed;
  m.run.tau_seg = t.tau_seg;
  return c;
}

inline PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  if (path.empty()) return parse_config("", fs::current_path(), overrides);
  std::ifstream in(path);
  if (!in) throw InputError("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::absolute(path).parent_path(), overrides);
}

/// Writes the effective settings so a run can be reproduced from its output directory.
/// Paths are written resolved, since the snapshot lives elsewhere than the source config.
inline void write_config_snapshot(const PipelineConfig& c, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  auto tree = c.tree;
  const std::pair<const char*, const fs::path*> paths[] = {
      {"scene", &c.scene}, {"cameras", &c.cameras}, {"masks", &c.masks}, {"images", &c.images}, {"output", &c.output}};
  for (const auto& [key, p] : paths)
    if (!p->empty()) tree.put(std::string("paths.") + key, fs::absolute(*p).lexically_normal().string());
  boost::property_tree::ini_parser::write_ini(out, tree);
}

}  // namespace splitscene
