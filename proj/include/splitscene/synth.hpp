#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "splitscene/rasterizer.hpp"
#include "splitscene/scene.hpp"

namespace splitscene::synth {

/// Random N(0, 0.1^2) feature.
inline Feature random_feature(std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.f, 0.1f);
  Feature f;
  for (int k = 0; k < kFeatureDim; ++k) f[k] = n(rng);
  return f;
}

inline Gaussian2D make_disk(const Vec3& center, const Vec3& normal, double scale, double opacity,
                            const Vec3& rgb, const Feature& feature = Feature::Zero()) {
  Gaussian2D g;
  const Vec3 n = normal.normalized();
  Vec3 helper = std::abs(n.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
  const Vec3 tu = helper.cross(n).normalized();
  const Vec3 tv = n.cross(tu).normalized();
  g.center = center.cast<float>();
  g.tangent_u = tu.cast<float>();
  g.tangent_v = tv.cast<float>();
  g.scale_u = g.scale_v = static_cast<float>(scale);
  g.opacity = static_cast<float>(opacity);
  set_rgb(g, rgb);
  g.feature = feature;
  return g;
}

/// Planar rectangle of disks on a jittered grid. `right`/`up` span the plane.
inline std::vector<Gaussian2D> make_card(const Vec3& center, const Vec3& right, const Vec3& up, double width,
                                         double height, int count, const Vec3& rgb, std::mt19937_64& rng,
                                         double opacity = 0.95, double jitter = 0.15) {
  const int cols = std::max(1, static_cast<int>(std::ceil(std::sqrt(count * width / height))));
  const int rows = std::max(1, (count + cols - 1) / cols);
  const double hx = width / cols, hy = height / rows;
  const double spacing = std::min(hx, hy);
  const Vec3 n = right.cross(up).normalized();
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::vector<Gaussian2D> out;
  for (int k = 0; k < count; ++k) {
    const int r = k / cols, c = k % cols;
    const double x = (c + 0.5) * hx - 0.5 * width + jitter * spacing * U(rng);
    const double y = (r + 0.5) * hy - 0.5 * height + jitter * spacing * U(rng);
    const double z = 0.02 * spacing * U(rng);
    const Vec3 shade = (rgb + 0.08 * Vec3(U(rng), U(rng), U(rng))).cwiseMax(0.0).cwiseMin(1.0);
    out.push_back(make_disk(center + x * right.normalized() + y * up.normalized() + z * n, n,
                            0.4 * spacing, opacity, shade, random_feature(rng)));
  }
  return out;
}

/// Disks tangent to a sphere (Fibonacci lattice), normals pointing outward.
inline std::vector<Gaussian2D> make_sphere(const Vec3& center, double radius, int count, const Vec3& rgb,
                                           const Feature& feature = Feature::Zero(), double opacity = 0.95) {
  std::vector<Gaussian2D> out;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const double scale = radius * std::sqrt(4.0 * std::numbers::pi / count) * 0.6;
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / count;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i;
    const Vec3 n(r * std::cos(phi), r * std::sin(phi), z);
    out.push_back(make_disk(center + radius * n, n, scale, opacity, rgb, feature));
  }
  return out;
}

/// Spherical shell of disks with circular holes around the given unit directions.
inline std::vector<Gaussian2D> make_shell(const Vec3& center, double radius, int count, const Vec3& rgb,
                                          const Feature& feature, const std::vector<Vec3>& holes,
                                          double hole_half_angle_rad, double opacity = 1.0) {
  auto disks = make_sphere(center, radius, count, rgb, feature, opacity);
  std::vector<Gaussian2D> out;
  const double c = std::cos(hole_half_angle_rad);
  for (const auto& g : disks) {
    const Vec3 d = (g.center.cast<double>() - center).normalized();
    bool in_hole = false;
    for (const auto& h : holes) in_hole |= d.dot(h.normalized()) > c;
    if (!in_hole) out.push_back(g);
  }
  return out;
}

/// Opaque rectangular wall of overlapping disks.
inline std::vector<Gaussian2D> make_wall(const Vec3& center, const Vec3& right, const Vec3& up, double width,
                                         double height, double spacing, const Vec3& rgb,
                                         const Feature& feature = Feature::Zero()) {
  const Vec3 n = right.cross(up).normalized();
  std::vector<Gaussian2D> out;
  const int nx = std::max(1, static_cast<int>(std::ceil(width / spacing)));
  const int ny = std::max(1, static_cast<int>(std::ceil(height / spacing)));
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const double x = (i + 0.5) * width / nx - 0.5 * width;
      const double y = (j + 0.5) * height / ny - 0.5 * height;
      out.push_back(make_disk(center + x * right.normalized() + y * up.normalized(), n, 0.9 * spacing, 1.0,
                              rgb, feature));
    }
  return out;
}

struct LayoutSpec {
  int instances = 3;
  int gaussians_per_instance = 100;
  int views = 12;  // cameras on the capture arc
  double noise = 0.0;
  std::uint64_t seed = 42;
  int width = 160;
  int height = 120;
  double card_size = 1.0;
  double gap = 0.6;
  double min_separation = 0.5;
  double arc_half_angle_deg = 40.0;
  double elevation_deg = 20.0;
};

enum class Corruption { Split, Merge };

struct CorruptionRecord {
  int frame = 0;
  Corruption kind = Corruption::Split;
  std::vector<int> instances;  // ground-truth instances involved
  int label = 0;               // resulting mask label in the frame
};

struct SynthResult {
  SplatScene scene;
  std::vector<int> labels;            // ground-truth instance (1..K) per gaussian
  std::vector<LabelMap> clean_masks;  // per frame, pixel = ground-truth instance id
  std::vector<CorruptionRecord> corruptions;
};

namespace detail {

/// Instance id per pixel: label of the dominant contributor where accumulated alpha > 0.5.
inline LabelMap render_instance_ids(const SplatScene& scene, const std::vector<int>& labels, const Camera& cam) {
  Rasterizer rast(scene.gaussians, scene.sh_degree, cam);
  LabelMap m(cam.width, cam.height);
  parallel_for(static_cast<std::size_t>(cam.height), [&](std::size_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < cam.width; ++x) {
      double acc = 0, best = 0;
      int best_label = 0;
      rast.trace(x, y, [&](std::uint32_t i, double, double w, double, double) {
        acc += w;
        if (w > best) {
          best = w;
          best_label = labels[i];
        }
      });
      m.at(x, y) = acc > 0.5 ? static_cast<std::uint16_t>(best_label) : 0;
    }
  });
  return m;
}

/// Relabels positive values densely (1..m) in a random order.
inline LabelMap densify(const LabelMap& in, std::mt19937_64& rng, std::map<int, int>* mapping = nullptr) {
  auto ids = in.ids();
  std::shuffle(ids.begin(), ids.end(), rng);
  std::map<int, int> remap;
  for (std::size_t k = 0; k < ids.size(); ++k) remap[ids[k]] = static_cast<int>(k) + 1;
  LabelMap out = in;
  for (auto& l : out.labels)
    if (l) l = static_cast<std::uint16_t>(remap[l]);
  if (mapping) *mapping = remap;
  return out;
}

}  // namespace detail

/// Carves a minority piece (8-15% of its pixels) off mask `label`: the pixels furthest along
/// image direction `angle` get `new_label`.
inline bool split_mask(LabelMap& m, int label, int new_label, double angle, std::mt19937_64& rng) {
  std::vector<std::pair<int, int>> px;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y) == label) px.emplace_back(x, y);
  if (px.size() < 10) return false;
  std::uniform_real_distribution<double> frac(0.08, 0.15);
  const Vec2 dir(std::cos(angle), std::sin(angle));
  std::vector<double> proj;
  for (auto [x, y] : px) proj.push_back(dir.dot(Vec2(x, y)));
  std::vector<double> sorted = proj;
  std::sort(sorted.begin(), sorted.end());
  const double cut = sorted[static_cast<std::size_t>((1.0 - frac(rng)) * (sorted.size() - 1))];
  for (std::size_t k = 0; k < px.size(); ++k)
    if (proj[k] > cut) m.at(px[k].first, px[k].second) = static_cast<std::uint16_t>(new_label);
  return true;
}

/// Generates a card-layout scene with ground truth and per-frame noisy masks.
inline SynthResult synth_scene(const LayoutSpec& spec) {
  if (spec.instances < 1) throw InputError("synth layout needs at least one instance");
  if (spec.gap < spec.min_separation)
    throw InputError("degenerate layout: instances closer than the minimum separation");
  std::mt19937_64 rng(spec.seed);
  SynthResult res;
  auto& scene = res.scene;

  // Cards stand in the x-z plane facing -y; rows of up to three.
  const int per_row = std::min(3, spec.instances);
  const int rows = (spec.instances + per_row - 1) / per_row;
  const double pitch = spec.card_size + spec.gap;
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  for (int k = 0; k < spec.instances; ++k) {
    const int r = k / per_row, c = k % per_row;
    const int in_row = std::min(per_row, spec.instances - r * per_row);
    const Vec3 center((c - 0.5 * (in_row - 1)) * pitch, 0.08 * U(rng), (0.5 * (rows - 1) - r) * pitch);
    const double yaw = 0.2 * U(rng), tilt = 0.15 * U(rng);
    const Vec3 right = Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Vec3::UnitX();
    const Vec3 up = Eigen::AngleAxisd(tilt, right) * Vec3::UnitZ();
    const double hue = static_cast<double>(k) / spec.instances;
    const Vec3 rgb(0.5 + 0.4 * std::cos(2 * std::numbers::pi * hue), 0.5 + 0.4 * std::cos(2 * std::numbers::pi * (hue + 1.0 / 3)),
                   0.5 + 0.4 * std::cos(2 * std::numbers::pi * (hue + 2.0 / 3)));
    auto card = make_card(center, right, up, spec.card_size, spec.card_size, spec.gaussians_per_instance, rgb, rng);
    for (auto& g : card) {
      scene.gaussians.push_back(g);
      res.labels.push_back(k + 1);
    }
  }

  // Cameras on an arc in front of the cards, looking at the layout center.
  const Vec3 target = centroid(scene.gaussians);
  const double fov = 50.0 * std::numbers::pi / 180.0;
  const double half_w = 0.5 * (per_row * pitch - spec.gap) + 0.1;
  const double half_h = 0.5 * (rows * pitch - spec.gap) + 0.1;
  const double tan_v = std::tan(0.5 * fov), tan_h = tan_v * spec.width / spec.height;
  const double dist = 1.1 * std::max(half_w / tan_h, half_h / tan_v) + 0.5;
  const double elev = spec.elevation_deg * std::numbers::pi / 180.0;
  for (int v = 0; v < spec.views; ++v) {
    const double t = spec.views == 1 ? 0.0 : -1.0 + 2.0 * v / (spec.views - 1);
    const double az = t * spec.arc_half_angle_deg * std::numbers::pi / 180.0;
    const Vec3 dir(std::sin(az) * std::cos(elev), -std::cos(az) * std::cos(elev), std::sin(elev));
    Frame f;
    f.index = v;
    f.camera = Camera::look_at(target + dist * dir, target, Vec3::UnitZ(), spec.width, spec.height, fov);
    scene.frames.push_back(std::move(f));
  }
  scene.scene_scale = compute_scene_scale(scene);

  // Clean per-frame instance maps and images.
  for (auto& f : scene.frames) {
    res.clean_masks.push_back(detail::render_instance_ids(scene, res.labels, f.camera));
    f.image = render(scene, f.camera, kDefaultCutoff, false).image();
  }

  // Corrupt ceil(noise * views) frames with one split or merge each. Repeated splits of one
  // instance carve from directions at least 100 degrees apart so the pieces stay disjoint.
  // A pair is merged at most once; when every visible pair is used the frame gets a split.
  std::vector<int> order(scene.frames.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const int corrupt = spec.noise > 0 ? static_cast<int>(std::ceil(spec.noise * spec.views - 1e-9)) : 0;
  std::set<int> corrupted(order.begin(), order.begin() + std::min<int>(corrupt, static_cast<int>(order.size())));
  std::map<int, std::vector<double>> split_dirs;
  std::set<std::pair<int, int>> merged_pairs;
  std::uniform_real_distribution<double> ang(0, 2 * std::numbers::pi);
  auto pick_pair = [&](const std::vector<int>& present) -> std::optional<std::pair<int, int>> {
    for (std::size_t i = 0; i < present.size(); ++i)
      for (std::size_t j = i + 1; j < present.size(); ++j)
        if (!merged_pairs.count({std::min(present[i], present[j]), std::max(present[i], present[j])}))
          return std::pair{present[i], present[j]};
    return std::nullopt;
  };
  auto pick_direction = [&](int inst) -> std::optional<double> {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double a = ang(rng);
      bool ok = true;
      for (double b : split_dirs[inst]) {
        const double d = std::abs(std::remainder(a - b, 2 * std::numbers::pi));
        ok &= d >= 100.0 * std::numbers::pi / 180.0;
      }
      if (ok) return a;
    }
    return std::nullopt;
  };
  for (std::size_t fi = 0; fi < scene.frames.size(); ++fi) {
    LabelMap m = res.clean_masks[fi];
    std::optional<CorruptionRecord> rec;
    if (corrupted.count(static_cast<int>(fi))) {
      auto present = m.ids();
      std::shuffle(present.begin(), present.end(), rng);
      const auto pair = pick_pair(present);
      const bool can_merge = pair.has_value();
      bool merge = can_merge && std::bernoulli_distribution(0.5)(rng);
      std::optional<double> dir;
      if (!merge && !present.empty()) {
        dir = pick_direction(present[0]);
        if (!dir) merge = can_merge;
      }
      if (merge) {
        const auto [a, b] = *pair;
        merged_pairs.insert({std::min(a, b), std::max(a, b)});
        for (auto& l : m.labels)
          if (l == b) l = static_cast<std::uint16_t>(a);
        rec = CorruptionRecord{scene.frames[fi].index, Corruption::Merge, {std::min(a, b), std::max(a, b)}, a};
      } else if (dir && split_mask(m, present[0], spec.instances + 1, *dir, rng)) {
        split_dirs[present[0]].push_back(*dir);
        rec = CorruptionRecord{scene.frames[fi].index, Corruption::Split, {present[0]}, spec.instances + 1};
      }
    }
    std::map<int, int> mapping;
    scene.frames[fi].mask_map = detail::densify(m, rng, &mapping);
    if (rec) {
      rec->label = mapping[rec->label];
      res.corruptions.push_back(*rec);
    }
  }
  return res;
}

/// Ball of radius 0.3 at the origin (instance 1) behind a cylindrical fence (instance 2) with
/// openings at azimuth 0 and 180 degrees. Features are constant per instance. Two frames look
/// through the openings.
inline SynthResult occluded_fixture(double gap_half_angle_deg = 20.0, int size = 64) {
  SynthResult res;
  auto& scene = res.scene;
  Feature fa = Feature::Zero(), fb = Feature::Zero();
  fa[0] = 1.f;
  fb[1] = 1.f;
  for (const auto& g : make_sphere(Vec3::Zero(), 0.3, 400, Vec3(0.85, 0.3, 0.2), fa, 1.0)) {
    scene.gaussians.push_back(g);
    res.labels.push_back(1);
  }
  const double r = 0.5, gap = gap_half_angle_deg * std::numbers::pi / 180.0, spacing = 0.04;
  const int around = static_cast<int>(std::ceil(2 * std::numbers::pi * r / spacing));
  for (int i = 0; i < around; ++i) {
    const double az = 2 * std::numbers::pi * i / around;
    const double d = std::min(std::abs(std::remainder(az, 2 * std::numbers::pi)),
                              std::abs(std::remainder(az - std::numbers::pi, 2 * std::numbers::pi)));
    if (d < gap) continue;
    const Vec3 n(std::cos(az), std::sin(az), 0.0);
    for (double z = -0.45; z <= 0.75; z += spacing) {
      scene.gaussians.push_back(make_disk(r * n + Vec3(0, 0, z), n, 0.9 * spacing, 1.0, Vec3(0.3, 0.4, 0.8), fb));
      res.labels.push_back(2);
    }
  }
  const double el = 30.0 * std::numbers::pi / 180.0;
  for (int v = 0; v < 2; ++v) {
    const double az = v * std::numbers::pi;
    Frame f;
    f.index = v;
    f.camera = Camera::look_at(0.75 * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)),
                               Vec3::Zero(), Vec3::UnitZ(), size, size, 55.0 * std::numbers::pi / 180.0);
    scene.frames.push_back(std::move(f));
  }
  scene.scene_scale = compute_scene_scale(scene);
  for (auto& f : scene.frames) {
    res.clean_masks.push_back(detail::render_instance_ids(scene, res.labels, f.camera));
    f.mask_map = res.clean_masks.back();
    f.image = render(scene, f.camera, kDefaultCutoff, false).image();
  }
  return res;
}

/// Injects one merged (under-segmented) mask covering two instances into the given frame.
inline CorruptionRecord inject_merge(SynthResult& s, std::size_t frame_pos, int a, int b, std::mt19937_64& rng) {
  LabelMap m = s.clean_masks[frame_pos];
  for (auto& l : m.labels)
    if (l == b) l = static_cast<std::uint16_t>(a);
  std::map<int, int> mapping;
  s.scene.frames[frame_pos].mask_map = detail::densify(m, rng, &mapping);
  CorruptionRecord rec{s.scene.frames[frame_pos].index, Corruption::Merge, {std::min(a, b), std::max(a, b)}, mapping[a]};
  s.corruptions.push_back(rec);
  return rec;
}

}  // namespace splitscene::synth
