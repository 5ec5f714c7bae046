#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "splitscene/config.hpp"
#include "splitscene/denoiser.hpp"
#include "splitscene/feature_field.hpp"
#include "splitscene/io.hpp"
#include "splitscene/orchestrator.hpp"
#include "splitscene/png.hpp"
#include "splitscene/refine.hpp"
#include "splitscene/synth.hpp"
#include "splitscene/tracker.hpp"

namespace splitscene::pipeline {

namespace fs = std::filesystem;

inline fs::path instances_path(const fs::path& out) { return out / "instances.json"; }
inline fs::path index_path(const fs::path& out, int id) { return out / ("instance_" + std::to_string(id) + ".idx"); }
inline fs::path trained_path(const fs::path& out) { return out / "trained.spl"; }

// ---- instances artifact ----

inline void write_indices(const fs::path& path, const std::vector<std::size_t>& idx) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(idx.size() * 4);
  for (auto i : idx)
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<std::uint8_t>(static_cast<std::uint32_t>(i) >> (8 * b)));
  io::detail::write_bytes(path, bytes);
}

inline std::vector<std::size_t> read_indices(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("index list not found: " + path.string());
  const auto bytes = io::detail::read_bytes(path);
  if (bytes.size() % 4) throw InputError("index list " + path.string() + " is truncated");
  std::vector<std::size_t> out(bytes.size() / 4);
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[4 * k + static_cast<std::size_t>(b)]) << (8 * b);
    out[k] = v;
  }
  return out;
}

inline nlohmann::json instances_json(const std::vector<InstanceRecord>& instances, const ClusterResult* clusters = nullptr,
                                     bool with_features = false) {
  nlohmann::json doc;
  doc["instances"] = nlohmann::json::array();
  for (const auto& inst : instances) {
    nlohmann::json j;
    j["id"] = inst.id;
    j["gaussian_count"] = inst.gaussians.size();
    j["frames"] = nlohmann::json::array();
    for (const auto& k : inst.masks) j["frames"].push_back({{"frame", k.frame}, {"mask", k.mask}});
    if (with_features) j["mean_feature"] = std::vector<double>(inst.mean_feature.data(), inst.mean_feature.data() + kFeatureDim);
    doc["instances"].push_back(j);
  }
  if (clusters) {
    auto keys = [](const std::vector<MaskKey>& ks) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& k : ks) a.push_back({{"frame", k.frame}, {"mask", k.mask}});
      return a;
    };
    doc["undersegmented"] = keys(clusters->undersegmented);
    doc["empty"] = keys(clusters->empty);
  }
  return doc;
}

inline void write_instances(const fs::path& out, const std::vector<InstanceRecord>& instances,
                            const ClusterResult* clusters = nullptr, bool with_features = false) {
  fs::create_directories(out);
  nlohmann::json doc = instances_json(instances, clusters, with_features);
  if (!clusters && fs::exists(instances_path(out))) {
    // Keep the clustering diagnostics from the earlier run.
    std::ifstream in(instances_path(out));
    const auto old = nlohmann::json::parse(in, nullptr, false);
    if (!old.is_discarded())
      for (const char* key : {"undersegmented", "empty"})
        if (old.contains(key)) doc[key] = old[key];
  }
  std::ofstream f(instances_path(out));
  if (!f) throw InputError("cannot write " + instances_path(out).string());
  f << doc.dump(2) << '\n';
  for (const auto& inst : instances) write_indices(index_path(out, inst.id), inst.gaussians);
}

inline std::vector<InstanceRecord> read_instances(const fs::path& out) {
  const auto path = instances_path(out);
  if (!fs::exists(path)) throw InputError("instances artifact not found: " + path.string() + " (run cluster first)");
  std::ifstream in(path);
  nlohmann::json doc;
  try {
    in >> doc;
    std::vector<InstanceRecord> res;
    for (const auto& j : doc.at("instances")) {
      InstanceRecord r;
      r.id = j.at("id").get<int>();
      for (const auto& k : j.at("frames")) r.masks.push_back({k.at("frame").get<int>(), k.at("mask").get<int>()});
      r.gaussians = read_indices(index_path(out, r.id));
      if (j.contains("mean_feature")) {
        const auto v = j.at("mean_feature").get<std::vector<double>>();
        if (v.size() != static_cast<std::size_t>(kFeatureDim)) throw InputError("mean_feature must have 16 entries");
        for (int k = 0; k < kFeatureDim; ++k) r.mean_feature[k] = v[static_cast<std::size_t>(k)];
      }
      res.push_back(std::move(r));
    }
    return res;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("instances artifact " + path.string() + ": " + e.what());
  }
}

inline const InstanceRecord& find_instance(const std::vector<InstanceRecord>& instances, int id) {
  for (const auto& i : instances)
    if (i.id == id) return i;
  throw LookupError("unknown instance id " + std::to_string(id));
}

/// Instance records from ground-truth labels (1..K); mean features from the scene.
inline std::vector<InstanceRecord> instances_from_labels(const SplatScene& scene, const std::vector<int>& labels) {
  std::map<int, InstanceRecord> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] <= 0) continue;
    auto& r = by_id[labels[i]];
    r.id = labels[i];
    r.gaussians.push_back(i);
    r.mean_feature += normalized(scene.gaussians[i].feature.cast<double>());
  }
  std::vector<InstanceRecord> out;
  for (auto& [id, r] : by_id) {
    r.mean_feature = normalized(r.mean_feature);
    for (const auto& f : scene.frames)
      for (int l : f.mask_map.ids())
        if (l == id) r.masks.push_back({f.index, l});
    out.push_back(std::move(r));
  }
  return out;
}

inline bool trained(const std::vector<InstanceRecord>& instances) {
  for (const auto& i : instances)
    if (i.mean_feature.isZero(0.0)) return false;
  return !instances.empty();
}

// ---- commands ----

inline void require(const fs::path& p, const std::string& what) {
  if (p.empty()) throw InputError(what + " path is not configured");
  if (!fs::exists(p)) throw InputError(what + " not found: " + p.string());
}

inline void prepare_output(const PipelineConfig& cfg) {
  fs::create_directories(cfg.output);
  write_config_snapshot(cfg, cfg.output / "config.snapshot.ini");
}

/// Scene with the trained container swapped in when present.
inline SplatScene load_working_scene(const PipelineConfig& cfg, bool need_trained) {
  require(cfg.scene, "scene");
  require(cfg.cameras, "cameras");
  auto paths = cfg.scene_paths();
  if (fs::exists(trained_path(cfg.output)))
    paths.scene = trained_path(cfg.output);
  else if (need_trained)
    throw InputError("trained scene not found: " + trained_path(cfg.output).string() + " (run fit first)");
  return io::load_bundle(paths);
}

inline int cmd_cluster(const PipelineConfig& cfg, std::ostream& log = std::cout) {
  require(cfg.scene, "scene");
  require(cfg.cameras, "cameras");
  if (cfg.masks.empty()) throw InputError("masks path is not configured");
  if (!fs::is_directory(cfg.masks)) throw InputError("masks directory not found: " + cfg.masks.string());
  const SplatScene scene = io::load_bundle(cfg.scene_paths());
  const auto res = build_instances(scene, cfg.clustering);
  prepare_output(cfg);
  write_instances(cfg.output, res.instances, &res.clusters);
  log << res.instances.size() << " instances\n";
  return 0;
}

inline int cmd_fit(const PipelineConfig& cfg, std::ostream& log = std::cout) {
  require(cfg.scene, "scene");
  require(cfg.cameras, "cameras");
  SplatScene scene = io::load_bundle(cfg.scene_paths());
  auto instances = read_instances(cfg.output);
  const auto res = train(scene, instances, cfg.training);
  prepare_output(cfg);
  io::save_scene(scene, trained_path(cfg.output));
  write_training_log((cfg.output / "fit.csv").string(), res.log);
  write_instances(cfg.output, instances, nullptr, true);
  if (res.single_instance)
    log << "single-instance scene: features left untrained\n";
  else if (!res.log.empty())
    log << "trained " << res.log.size() << " iterations, final loss " << res.log.back().loss.total << '\n';
  else
    log << "no iterations requested\n";
  return 0;
}

inline int cmd_extract(const PipelineConfig& cfg, int id, std::ostream& log = std::cout) {
  const auto instances = read_instances(cfg.output);
  const auto& inst = find_instance(instances, id);
  if (!trained(instances)) throw InputError("instances have no trained features (run fit first)");
  const SplatScene scene = io::load_scene(trained_path(cfg.output));
  const auto keep = segment_instance(scene, inst, cfg.training.tau_seg);
  std::vector<char> in(scene.gaussians.size(), 0);
  for (auto i : keep) in[i] = 1;
  std::vector<Gaussian2D> a, b;
  for (std::size_t i = 0; i < scene.gaussians.size(); ++i) (in[i] ? a : b).push_back(scene.gaussians[i]);
  prepare_output(cfg);
  io::save_gaussians(a, scene.sh_degree, cfg.output / ("instance_" + std::to_string(id) + ".spl"));
  io::save_gaussians(b, scene.sh_degree, cfg.output / ("remainder_" + std::to_string(id) + ".spl"));
  log << "instance " << id << ": " << a.size() << " gaussians extracted, " << b.size() << " remain\n";
  return 0;
}

struct CompletionOutputs {
  CompletionJob job;
  std::vector<std::size_t> gaussians;
  std::vector<Gaussian2D> refined;
  RefineResult refine;
  bool skipped = false;
};

/// Pixels of a frame whose mask belongs to the instance.
inline LabelMap instance_mask(const Frame& f, const InstanceRecord& inst) {
  LabelMap m(f.mask_map.width, f.mask_map.height);
  std::set<int> ids;
  for (const auto& k : inst.masks)
    if (k.frame == f.index) ids.insert(k.mask);
  for (std::size_t p = 0; p < m.labels.size(); ++p) m.labels[p] = ids.count(f.mask_map.labels[p]) ? 1 : 0;
  return m;
}

inline std::unique_ptr<Denoiser> make_denoiser(const std::string& spec, const SplatScene& scene,
                                               const std::vector<std::size_t>& gaussians, const ViewpointPlan& plan) {
  if (spec == "mock") return std::make_unique<MockDenoiser>(instance_latents(scene, gaussians, plan.poses, plan.targets));
  std::istringstream in(spec);
  std::vector<std::string> argv;
  for (std::string a; in >> a;) argv.push_back(a);
  return std::make_unique<SubprocessDenoiser>(argv);
}

/// Completion of one instance: plan, condition renders, denoising, joint refinement.
inline CompletionOutputs complete(const SplatScene& scene, const InstanceRecord& inst, const CompletionSettings& cs) {
  CompletionOutputs out;
  out.gaussians = segment_instance(scene, inst, cs.run.tau_seg);
  InstanceRecord seg = inst;
  seg.gaussians = out.gaussians;
  out.job.plan = plan_viewpoints(scene, seg.gaussians, cs.run.views, cs.run.threshold, cs.run.min_conditions);
  for (int v : out.job.plan.conditions)
    out.job.conditions.push_back(
        render_condition(scene, seg.mean_feature, out.job.plan.poses[static_cast<std::size_t>(v)], cs.run.tau_seg));
  out.refined = subset(scene.gaussians, seg.gaussians);
  if (out.job.plan.targets.empty()) {
    out.skipped = true;
    return out;
  }
  auto denoiser = make_denoiser(cs.denoiser, scene, seg.gaussians, out.job.plan);
  const auto [conds, targets] = completion_inputs(scene, seg.gaussians, out.job.plan, out.job.conditions);
  out.job.result = run_completion(conds, targets, out.job.plan.poses, *denoiser, cs.run);

  std::vector<RefineView> views;
  for (const auto& f : scene.frames) {
    if (f.image.empty() || f.mask_map.empty()) continue;
    RefineView v{f.camera, f.image, instance_mask(f, inst), cs.source_weight, 1, Vec3::Zero()};
    if (std::find(v.mask.labels.begin(), v.mask.labels.end(), 1) == v.mask.labels.end()) continue;
    views.push_back(std::move(v));
  }
  for (std::size_t n = 0; n < out.job.result.targets.size(); ++n) {
    const auto& lat = out.job.result.latents[n];
    RefineView v;
    v.camera = out.job.plan.poses[static_cast<std::size_t>(out.job.result.targets[n])];
    v.target = Image(lat.width, lat.height, 3);
    for (std::size_t i = 0; i < lat.data.size(); ++i) v.target.data[i] = static_cast<float>(lat.data[i]);
    v.mask = LabelMap(lat.width, lat.height);
    for (std::size_t c = 0; c < lat.cells(); ++c) v.mask.labels[c] = lat.known[c] ? 0 : 1;
    v.weight = cs.generated_weight;
    v.pool = kLatentFactor;
    v.background = Vec3::Ones();
    views.push_back(std::move(v));
  }
  out.refine = joint_refine(out.refined, scene.sh_degree, views, cs.refine);
  out.refined = out.refine.gaussians;
  return out;
}

inline nlohmann::json plan_json(const ViewpointPlan& plan) {
  nlohmann::json j;
  j["poses"] = nlohmann::json::array();
  for (std::size_t k = 0; k < plan.poses.size(); ++k) j["poses"].push_back(io::camera_to_json(static_cast<int>(k), plan.poses[k]));
  j["occlusion"] = plan.occlusion;
  j["conditions"] = plan.conditions;
  j["targets"] = plan.targets;
  return j;
}

inline int cmd_complete(const PipelineConfig& cfg, int id, std::ostream& log = std::cout) {
  const auto instances = read_instances(cfg.output);
  const auto& inst = find_instance(instances, id);
  if (!trained(instances)) throw InputError("instances have no trained features (run fit first)");
  const SplatScene scene = load_working_scene(cfg, true);
  const auto out = complete(scene, inst, cfg.completion);
  prepare_output(cfg);
  const fs::path dir = cfg.output / ("complete_" + std::to_string(id));
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "plan.json");
    f << plan_json(out.job.plan).dump(2) << '\n';
  }
  for (std::size_t i = 0; i < out.job.conditions.size(); ++i)
    png::write_rgb(dir / ("condition_" + std::to_string(out.job.plan.conditions[i]) + ".png"), out.job.conditions[i].image);
  if (out.skipped) {
    log << "instance " << id << " is fully observed: completion skipped\n";
    return 0;
  }
  for (std::size_t n = 0; n < out.job.result.targets.size(); ++n)
    png::write_rgb(dir / ("generated_" + std::to_string(out.job.result.targets[n]) + ".png"), out.job.result.images[n]);
  io::save_gaussians(out.refined, scene.sh_degree, dir / "refined.spl");
  log << "instance " << id << ": " << out.job.plan.conditions.size() << " condition views, "
      << out.job.result.targets.size() << " generated views, refinement loss " << out.refine.initial_loss << " -> "
      << out.refine.final_loss << '\n';
  return 0;
}

/// Writes a synthetic fixture bundle plus a matching config file. With `pretrained`, the
/// ground-truth instances and the scene (whose features are final) go to the output directory.
inline fs::path write_synth_bundle(const synth::SynthResult& s, const fs::path& dir, bool pretrained = false) {
  fs::create_directories(dir);
  io::save_bundle(s.scene, {dir / "scene.spl", dir / "cameras.json", dir / "masks", dir / "images"});
  nlohmann::json labels;
  labels["labels"] = s.labels;
  std::ofstream(dir / "ground_truth.json") << labels.dump() << '\n';
  const fs::path cfg = dir / "config.ini";
  std::ofstream c(cfg);
  c << "seed = 42\n\n[paths]\nscene = scene.spl\ncameras = cameras.json\nmasks = masks\nimages = images\noutput = out\n";
  if (pretrained) {
    write_instances(dir / "out", instances_from_labels(s.scene, s.labels), nullptr, true);
    io::save_scene(s.scene, trained_path(dir / "out"));
  }
  return cfg;
}

}  // namespace splitscene::pipeline
