#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "splitscene/denoiser.hpp"
#include "splitscene/diffusion.hpp"
#include "splitscene/latent.hpp"
#include "splitscene/viewpoints.hpp"

namespace splitscene {

/// Average: every condition view is queried each step and the predictions averaged.
/// RoundRobin: a single condition view per step, cycling through them.
enum class ConditionMode { Average, RoundRobin };

struct CompletionConfig {
  NoiseSchedule schedule = NoiseSchedule::linear(50);
  ConditionMode mode = ConditionMode::Average;
  std::uint64_t seed = 0;
  double threshold = 0.05;
  int min_conditions = 2;
  double tau_seg = 0.9;
  ViewpointConfig views;
};

struct ConditionInput {
  int view = 0;
  LatentGrid latent;  // clean encoded condition
  ViewGeometry geometry;
};

struct TargetInput {
  int view = 0;
  Camera camera;  // latent resolution
};

struct CompletionResult {
  std::vector<int> targets;
  std::vector<LatentGrid> latents;  // x_0 per target, known flags set on warped cells
  std::vector<Image> images;
};

/// Called after the known cells of a target are overwritten at timestep t.
using CompletionObserver = std::function<void(int t, std::size_t target, const LatentGrid& x_t, const LatentGrid& warped)>;

namespace detail {

/// Which (condition, source cell) lands on every target cell; channel 0 = condition, 1 = cell.
inline LatentGrid warp_map(const std::vector<ConditionInput>& conds, const Camera& target) {
  WarpResult acc = empty_warp(target, 2);
  for (std::size_t k = 0; k < conds.size(); ++k) {
    LatentGrid ids(conds[k].latent.width, conds[k].latent.height, 2);
    for (std::size_t c = 0; c < ids.cells(); ++c) {
      ids.data[2 * c] = static_cast<double>(k);
      ids.data[2 * c + 1] = static_cast<double>(c);
    }
    warp_into(acc, ids, conds[k].geometry, target);
  }
  return acc.grid;
}

inline LatentGrid apply_map(const LatentGrid& map, const std::vector<const LatentGrid*>& sources, int channels) {
  LatentGrid out(map.width, map.height, channels);
  for (std::size_t c = 0; c < map.cells(); ++c) {
    if (!map.known[c]) continue;
    const auto& src = *sources[static_cast<std::size_t>(map.data[2 * c])];
    const auto sc = static_cast<std::size_t>(map.data[2 * c + 1]);
    out.known[c] = 1;
    for (int ch = 0; ch < channels; ++ch) out.data[c * channels + ch] = src.data[sc * channels + ch];
  }
  return out;
}

}  // namespace detail

/// Condition-guided denoising of every target view. Each step noises the condition latents
/// to level t, overwrites the warped-known cells of every target with them, then updates the
/// unknown cells with the averaged noise prediction. Known cells end as the clean warps.
inline CompletionResult run_completion(const std::vector<ConditionInput>& conds, const std::vector<TargetInput>& targets,
                                       const std::vector<Camera>& poses, Denoiser& denoiser, const CompletionConfig& cfg,
                                       const CompletionObserver& observe = {}) {
  CompletionResult res;
  if (targets.empty()) return res;
  if (conds.empty()) throw InputError("completion needs at least one condition view");
  const int C = conds.front().latent.channels;
  for (const auto& c : conds)
    if (!c.latent.same_shape(conds.front().latent)) throw InputError("condition latents differ in shape");
  const auto& S = cfg.schedule;
  const int T = S.steps();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nd(0.0, 1.0);

  std::vector<LatentGrid> maps, x;
  for (const auto& tg : targets) {
    maps.push_back(detail::warp_map(conds, tg.camera));
    LatentGrid g(tg.camera.width, tg.camera.height, C);
    for (auto& v : g.data) v = nd(rng);
    g.known = maps.back().known;
    x.push_back(std::move(g));
  }
  std::vector<const LatentGrid*> clean;
  for (const auto& c : conds) clean.push_back(&c.latent);

  auto rel = [&](int n, int k) -> Eigen::Matrix4d {
    return (poses[static_cast<std::size_t>(n)].world_to_camera() * poses[static_cast<std::size_t>(k)].world_to_camera().inverse())
        .matrix();
  };

  std::vector<LatentGrid> noisy(conds.size());
  for (int t = T; t >= 1; --t) {
    for (std::size_t k = 0; k < conds.size(); ++k) {
      noisy[k] = conds[k].latent;
      for (auto& v : noisy[k].data) v = add_noise(v, nd(rng), t, S);
    }
    std::vector<const LatentGrid*> src;
    for (const auto& n : noisy) src.push_back(&n);
    std::vector<std::size_t> active;
    if (cfg.mode == ConditionMode::RoundRobin)
      active.push_back(static_cast<std::size_t>(T - t) % conds.size());
    else
      for (std::size_t k = 0; k < conds.size(); ++k) active.push_back(k);

    const unsigned workers = denoiser.concurrent() ? 0u : 1u;
    parallel_for(
        targets.size(),
        [&](std::size_t n) {
          LatentGrid& xn = x[n];
          const LatentGrid warped = detail::apply_map(maps[n], src, C);
          for (std::size_t c = 0; c < xn.cells(); ++c)
            if (warped.known[c])
              for (int ch = 0; ch < C; ++ch) xn.data[c * C + ch] = warped.data[c * C + ch];
          if (observe) observe(t, n, xn, warped);
          std::vector<std::vector<double>> preds;
          for (auto k : active) {
            DenoiseRequest req{&xn, &conds[k].latent, rel(targets[n].view, conds[k].view), t, S.alpha_bar(t),
                               targets[n].view, conds[k].view};
            try {
              preds.push_back(denoiser.predict(req));
            } catch (const std::exception& e) {
              throw BackendError("denoiser failed at timestep " + std::to_string(t) + " for view " +
                                 std::to_string(targets[n].view) + ": " + e.what());
            }
            if (preds.back().size() != xn.data.size())
              throw BackendError("denoiser output shape mismatch at timestep " + std::to_string(t));
          }
          const auto eps = average_noise(preds);
          const auto next = ddpm_step(xn.data, eps, t, S);
          for (std::size_t c = 0; c < xn.cells(); ++c)
            if (!warped.known[c])
              for (int ch = 0; ch < C; ++ch) xn.data[c * C + ch] = next[c * C + ch];
        },
        workers);
  }
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const LatentGrid warped = detail::apply_map(maps[n], clean, C);
    for (std::size_t c = 0; c < x[n].cells(); ++c)
      if (warped.known[c])
        for (int ch = 0; ch < C; ++ch) x[n].data[c * C + ch] = warped.data[c * C + ch];
    res.targets.push_back(targets[n].view);
    res.images.push_back(decode(x[n]));
    res.latents.push_back(std::move(x[n]));
  }
  return res;
}

/// Instance alone rendered from each pose and encoded, composited over white.
inline std::map<int, LatentGrid> instance_latents(const SplatScene& scene, const std::vector<std::size_t>& instance,
                                                  const std::vector<Camera>& poses, const std::vector<int>& views) {
  const auto alone = subset(scene.gaussians, instance);
  std::map<int, LatentGrid> out;
  for (int v : views)
    out[v] = encode(render(alone, scene.sh_degree, poses[static_cast<std::size_t>(v)], kDefaultCutoff, false).image(Vec3::Ones()));
  return out;
}

struct CompletionJob {
  ViewpointPlan plan;
  std::vector<ConditionRender> conditions;
  CompletionResult result;
};

/// Latent-resolution inputs for the chosen condition and target views.
inline std::pair<std::vector<ConditionInput>, std::vector<TargetInput>> completion_inputs(
    const SplatScene& scene, const std::vector<std::size_t>& instance, const ViewpointPlan& plan,
    const std::vector<ConditionRender>& renders) {
  const auto alone = subset(scene.gaussians, instance);
  const double f = 1.0 / kLatentFactor;
  std::vector<ConditionInput> conds;
  for (std::size_t i = 0; i < plan.conditions.size(); ++i) {
    const int v = plan.conditions[i];
    const Camera lc = plan.poses[static_cast<std::size_t>(v)].scaled(f);
    const RenderOutput geo = render(alone, scene.sh_degree, lc, kDefaultCutoff, false);
    conds.push_back({v, encode(renders[i].image), geometry_from_render(geo, lc)});
  }
  std::vector<TargetInput> targets;
  for (int v : plan.targets) targets.push_back({v, plan.poses[static_cast<std::size_t>(v)].scaled(f)});
  return {std::move(conds), std::move(targets)};
}

/// Plans viewpoints, renders conditions and runs the denoising loop for one instance.
inline CompletionJob complete_instance(const SplatScene& scene, const InstanceRecord& inst, Denoiser& denoiser,
                                       const CompletionConfig& cfg, const CompletionObserver& observe = {}) {
  if (cfg.views.width % kLatentFactor || cfg.views.height % kLatentFactor)
    throw InputError("view size must be a multiple of " + std::to_string(kLatentFactor));
  CompletionJob job;
  job.plan = plan_viewpoints(scene, inst.gaussians, cfg.views, cfg.threshold, cfg.min_conditions);
  for (int v : job.plan.conditions)
    job.conditions.push_back(render_condition(scene, inst.mean_feature, job.plan.poses[static_cast<std::size_t>(v)], cfg.tau_seg));
  if (job.plan.targets.empty()) return job;
  const auto [conds, targets] = completion_inputs(scene, inst.gaussians, job.plan, job.conditions);
  job.result = run_completion(conds, targets, job.plan.poses, denoiser, cfg, observe);
  return job;
}

}  // namespace splitscene
