#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "splitscene/feature_field.hpp"
#include "splitscene/rasterizer.hpp"
#include "splitscene/scene.hpp"

namespace splitscene {

struct ViewpointConfig {
  int count = 16;
  double elevation_deg = 30.0;
  double radius_scale = 2.5;
  double fov_y_deg = 55.0;
  int width = 128;
  int height = 128;
};

struct ViewpointPlan {
  std::vector<Camera> poses;
  std::vector<double> occlusion;
  std::vector<int> conditions;
  std::vector<int> targets;

  /// Transform taking camera-k coordinates to camera-n coordinates.
  Eigen::Matrix4d relative_pose(int n, int k) const {
    return (poses[static_cast<std::size_t>(n)].world_to_camera() * poses[static_cast<std::size_t>(k)].world_to_camera().inverse())
        .matrix();
  }
};

inline std::vector<Gaussian2D> subset(const std::vector<Gaussian2D>& gs, const std::vector<std::size_t>& idx) {
  std::vector<Gaussian2D> out;
  out.reserve(idx.size());
  for (auto i : idx) {
    if (i >= gs.size()) throw InputError("gaussian index " + std::to_string(i) + " out of range");
    out.push_back(gs[i]);
  }
  return out;
}

/// Ring of poses around the instance: fixed elevation, even azimuth steps, Z up.
inline std::vector<Camera> propose_viewpoints(const std::vector<Gaussian2D>& instance, const ViewpointConfig& cfg = {}) {
  if (instance.empty()) throw InputError("cannot place viewpoints around an empty instance");
  const Vec3 c = centroid(instance);
  double radius = 0.0;
  for (const auto& g : instance) radius = std::max(radius, (g.center.cast<double>() - c).norm());
  if (!(radius > 1e-9)) throw InputError("instance has zero extent");
  const double el = cfg.elevation_deg * std::numbers::pi / 180.0;
  const double dist = cfg.radius_scale * radius;
  std::vector<Camera> poses;
  for (int k = 0; k < cfg.count; ++k) {
    const double az = 2.0 * std::numbers::pi * k / cfg.count;
    const Vec3 eye = c + dist * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    poses.push_back(Camera::look_at(eye, c, Vec3::UnitZ(), cfg.width, cfg.height, cfg.fov_y_deg * std::numbers::pi / 180.0));
  }
  return poses;
}

/// Share of the instance silhouette hidden behind other scene content.
inline double occlusion_score(const Camera& pose, const std::vector<std::size_t>& instance, const SplatScene& scene) {
  const auto alone = subset(scene.gaussians, instance);
  const RenderOutput inst = render(alone, scene.sh_degree, pose, kDefaultCutoff, false);
  const RenderOutput full = render(scene, pose, kDefaultCutoff, false);
  const double eps = 1e-3 * scene.scene_scale;
  std::size_t silhouette = 0, hidden = 0;
  for (std::size_t p = 0; p < inst.alpha.size(); ++p) {
    if (inst.alpha[p] <= 0.5f) continue;
    ++silhouette;
    if (full.depth[p] > 0.f && full.depth[p] < inst.depth[p] - eps) ++hidden;
  }
  return silhouette == 0 ? 1.0 : static_cast<double>(hidden) / static_cast<double>(silhouette);
}

/// Views scoring at most `threshold` become conditions; at least `min_conditions` lowest are kept.
inline void classify_views(ViewpointPlan& plan, double threshold = 0.05, int min_conditions = 2) {
  const int n = static_cast<int>(plan.occlusion.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return plan.occlusion[static_cast<std::size_t>(a)] < plan.occlusion[static_cast<std::size_t>(b)];
  });
  std::vector<char> cond(static_cast<std::size_t>(n), 0);
  int taken = 0;
  for (int i : order)
    if (plan.occlusion[static_cast<std::size_t>(i)] <= threshold) cond[static_cast<std::size_t>(i)] = 1, ++taken;
  for (int i : order) {
    if (taken >= std::min(min_conditions, n)) break;
    if (!cond[static_cast<std::size_t>(i)]) cond[static_cast<std::size_t>(i)] = 1, ++taken;
  }
  plan.conditions.clear();
  plan.targets.clear();
  for (int i = 0; i < n; ++i) (cond[static_cast<std::size_t>(i)] ? plan.conditions : plan.targets).push_back(i);
}

inline ViewpointPlan plan_viewpoints(const SplatScene& scene, const std::vector<std::size_t>& instance,
                                     const ViewpointConfig& cfg = {}, double threshold = 0.05, int min_conditions = 2) {
  ViewpointPlan plan;
  plan.poses = propose_viewpoints(subset(scene.gaussians, instance), cfg);
  plan.occlusion.resize(plan.poses.size());
  for (std::size_t k = 0; k < plan.poses.size(); ++k) plan.occlusion[k] = occlusion_score(plan.poses[k], instance, scene);
  classify_views(plan, threshold, min_conditions);
  return plan;
}

struct ConditionRender {
  Image image;    // instance over white
  LabelMap mask;  // 1 on instance pixels
  RenderOutput render;
};

/// Full-scene render with every pixel not matching the instance feature turned white.
inline ConditionRender render_condition(const SplatScene& scene, const FeatureD& mean_feature, const Camera& pose,
                                        double tau = 0.9) {
  ConditionRender out;
  out.render = render(scene, pose, kDefaultCutoff, true);
  out.mask = similarity_mask(out.render, mean_feature, tau);
  out.image = out.render.image(Vec3::Ones());
  for (int y = 0; y < pose.height; ++y)
    for (int x = 0; x < pose.width; ++x)
      if (!out.mask.at(x, y))
        for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = 1.f;
  return out;
}

}  // namespace splitscene
