#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "splitscene/core.hpp"
#include "splitscene/dbscan.hpp"
#include "splitscene/rasterizer.hpp"
#include "splitscene/scene.hpp"

namespace splitscene {

struct ClusterConfig {
  double membership_transmittance = 0.5;
  double visible_ratio = 0.3;
  double contain_ratio = 0.8;
  double merge_threshold = 0.9;
  double underseg_intersect = 0.2;
  double underseg_consistency = 0.8;
  double dbscan_eps_scale = 2.0;
  int dbscan_min_points = 8;
  double floater_min_fraction = 0.05;
  double cutoff = kDefaultCutoff;
};

struct MaskKey {
  int frame = 0;
  int mask = 0;
  auto operator<=>(const MaskKey&) const = default;
};

/// Gaussians that effectively contribute to one 2D mask.
struct SpatialTracker {
  MaskKey key;
  IndexBits members;
  std::size_t size = 0;
};

/// Per-frame state the tracker predicates need.
struct FrameTrackers {
  int frame = 0;
  IndexBits contributing;  // nonzero weight at some pixel of the frame
  std::vector<SpatialTracker> trackers;
};

namespace detail {
inline bool at_least(std::size_t hit, std::size_t total, double ratio) {
  return static_cast<double>(hit) >= ratio * static_cast<double>(total) - 1e-9;
}
}  // namespace detail

/// Trackers for every mask of a frame, plus its contributing set, from one pass over the frame.
inline FrameTrackers build_frame_trackers(const SplatScene& scene, const Frame& frame,
                                          const ClusterConfig& cfg = {}) {
  const std::size_t n = scene.gaussians.size();
  FrameTrackers out;
  out.frame = frame.index;
  out.contributing = IndexBits(n);
  const auto ids = frame.mask_map.ids();
  const int max_id = ids.empty() ? 0 : ids.back();
  std::vector<IndexBits> members(static_cast<std::size_t>(max_id) + 1, IndexBits(n));
  const Rasterizer rast(scene.gaussians, scene.sh_degree, frame.camera, cfg.cutoff);
  const auto list = rast.contributions();
  const float tmin = static_cast<float>(cfg.membership_transmittance);
  for (std::size_t k = 0; k < list.size(); ++k) {
    const auto [x, y] = list.pixels[k];
    const int label = frame.mask_map.at(x, y);
    for (const auto& c : list.at(k)) {
      out.contributing.set(c.gaussian);
      if (label > 0 && c.transmittance > tmin) members[static_cast<std::size_t>(label)].set(c.gaussian);
    }
  }
  for (int id : ids) {
    SpatialTracker t{{frame.index, id}, std::move(members[static_cast<std::size_t>(id)]), 0};
    t.size = t.members.count();
    out.trackers.push_back(std::move(t));
  }
  return out;
}

/// Tracker of a single mask.
inline SpatialTracker build_tracker(const SplatScene& scene, int frame_index, int mask_id,
                                    const ClusterConfig& cfg = {}) {
  const Frame* f = scene.frame(frame_index);
  if (!f) throw InputError("no frame " + std::to_string(frame_index));
  std::vector<std::pair<int, int>> px;
  for (int y = 0; y < f->mask_map.height; ++y)
    for (int x = 0; x < f->mask_map.width; ++x)
      if (f->mask_map.at(x, y) == mask_id) px.emplace_back(x, y);
  if (px.empty()) throw InputError("frame " + std::to_string(frame_index) + " has no mask " + std::to_string(mask_id));
  const auto list = contribution_list(scene, f->camera, px, cfg.cutoff);
  SpatialTracker t{{frame_index, mask_id}, IndexBits(scene.gaussians.size()), 0};
  const float tmin = static_cast<float>(cfg.membership_transmittance);
  for (std::size_t k = 0; k < list.size(); ++k)
    for (const auto& c : list.at(k))
      if (c.transmittance > tmin) t.members.set(c.gaussian);
  t.size = t.members.count();
  return t;
}

inline bool is_visible(const SpatialTracker& t, const FrameTrackers& f, const ClusterConfig& cfg = {}) {
  if (t.size == 0) return false;
  return detail::at_least(t.members.count_and(f.contributing), t.size, cfg.visible_ratio);
}

/// Fraction of t's members inside container.
inline double containment(const SpatialTracker& t, const SpatialTracker& container) {
  return t.size == 0 ? 0.0 : static_cast<double>(t.members.count_and(container.members)) / static_cast<double>(t.size);
}

/// The frame tracker holding the largest share of t, if that share reaches the ratio.
inline std::optional<MaskKey> is_contained(const SpatialTracker& t, const FrameTrackers& f,
                                           const ClusterConfig& cfg = {}) {
  std::optional<MaskKey> best;
  std::size_t best_hit = 0;
  for (const auto& c : f.trackers) {
    const std::size_t hit = t.members.count_and(c.members);
    if (t.size > 0 && detail::at_least(hit, t.size, cfg.contain_ratio) && (!best || hit > best_hit)) {
      best = c.key;
      best_hit = hit;
    }
  }
  return best;
}

struct Consensus {
  int visible_frames = 0;
  int contained_frames = 0;
  double rate = 0.0;
};

/// Over frames seeing both trackers, how often one mask of that frame contains both.
inline Consensus consensus_rate(const SpatialTracker& a, const SpatialTracker& b, const std::vector<FrameTrackers>& frames,
                                const ClusterConfig& cfg = {}) {
  Consensus c;
  for (const auto& f : frames) {
    if (!is_visible(a, f, cfg) || !is_visible(b, f, cfg)) continue;
    ++c.visible_frames;
    for (const auto& t : f.trackers) {
      if (a.size > 0 && b.size > 0 && detail::at_least(a.members.count_and(t.members), a.size, cfg.contain_ratio) &&
          detail::at_least(b.members.count_and(t.members), b.size, cfg.contain_ratio)) {
        ++c.contained_frames;
        break;
      }
    }
  }
  c.rate = c.visible_frames == 0 ? 0.0 : static_cast<double>(c.contained_frames) / c.visible_frames;
  return c;
}

/// True when t straddles two or more masks in most frames where it is visible.
inline bool detect_undersegmentation(const SpatialTracker& t, const std::vector<FrameTrackers>& frames,
                                     const ClusterConfig& cfg = {}) {
  int visible = 0, straddling = 0;
  for (const auto& f : frames) {
    if (!is_visible(t, f, cfg)) continue;
    ++visible;
    int hits = 0;
    for (const auto& other : f.trackers) {
      if (other.key == t.key || other.size == 0) continue;
      if (detail::at_least(other.members.count_and(t.members), other.size, cfg.underseg_intersect)) ++hits;
    }
    if (hits >= 2) ++straddling;
  }
  return visible > 0 && detail::at_least(static_cast<std::size_t>(straddling), static_cast<std::size_t>(visible),
                                         cfg.underseg_consistency);
}

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<std::size_t> parent_;
};

struct ClusterResult {
  std::vector<std::vector<MaskKey>> clusters;  // sorted keys, clusters ordered by first key
  std::vector<MaskKey> undersegmented;
  std::vector<MaskKey> empty;
};

/// Groups the masks of all frames into instance clusters.
inline ClusterResult cluster_masks(const std::vector<FrameTrackers>& frames, const ClusterConfig& cfg = {}) {
  ClusterResult out;
  std::vector<const SpatialTracker*> nodes;
  std::vector<const SpatialTracker*> all;
  for (const auto& f : frames)
    for (const auto& t : f.trackers) all.push_back(&t);
  std::vector<char> under(all.size(), 0);
  parallel_for(all.size(), [&](std::size_t i) { under[i] = all[i]->size > 0 && detect_undersegmentation(*all[i], frames, cfg); });
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i]->size == 0) {
      out.empty.push_back(all[i]->key);
      log_warning("mask " + std::to_string(all[i]->key.mask) + " of frame " + std::to_string(all[i]->key.frame) +
                  " covers no gaussian; skipped");
    } else if (under[i]) {
      out.undersegmented.push_back(all[i]->key);
    } else {
      nodes.push_back(all[i]);
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->key < b->key; });

  // Visibility and pairwise containment tables, so each pair costs only a frame scan.
  const std::size_t nf = frames.size();
  std::vector<std::vector<char>> vis(nodes.size(), std::vector<char>(nf, 0));
  std::vector<std::vector<IndexBits>> contained_in(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t i) {
    contained_in[i].resize(nf);
    for (std::size_t f = 0; f < nf; ++f) {
      vis[i][f] = is_visible(*nodes[i], frames[f], cfg);
      contained_in[i][f] = IndexBits(frames[f].trackers.size());
      for (std::size_t t = 0; t < frames[f].trackers.size(); ++t)
        if (detail::at_least(nodes[i]->members.count_and(frames[f].trackers[t].members), nodes[i]->size, cfg.contain_ratio))
          contained_in[i][f].set(t);
    }
  });

  UnionFind uf(nodes.size());
  std::vector<std::vector<std::size_t>> edges(nodes.size());
  parallel_for(nodes.size(), [&](std::size_t i) {
    for (std::size_t j = i + 1; j < nodes.size(); ++j) {
      int nv = 0, nc = 0;
      for (std::size_t f = 0; f < nf; ++f) {
        if (!vis[i][f] || !vis[j][f]) continue;
        ++nv;
        if (contained_in[i][f].count_and(contained_in[j][f]) > 0) ++nc;
      }
      if (nv > 0 && static_cast<double>(nc) / nv > cfg.merge_threshold) edges[i].push_back(j);
    }
  });
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (auto j : edges[i]) uf.unite(i, j);

  std::map<std::size_t, std::vector<MaskKey>> groups;
  for (std::size_t i = 0; i < nodes.size(); ++i) groups[uf.find(i)].push_back(nodes[i]->key);
  for (auto& [root, keys] : groups) out.clusters.push_back(std::move(keys));
  std::sort(out.clusters.begin(), out.clusters.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

/// Drops spatially isolated gaussians: keeps DBSCAN clusters holding at least the configured share.
inline std::vector<std::size_t> filter_floaters(const std::vector<Gaussian2D>& gaussians,
                                                const std::vector<std::size_t>& indices, const ClusterConfig& cfg = {}) {
  if (indices.empty()) return {};
  std::vector<Vec3> pts;
  pts.reserve(indices.size());
  for (auto i : indices) pts.push_back(gaussians[i].center.cast<double>());
  const double eps = cfg.dbscan_eps_scale * median_nearest_neighbor(pts);
  const auto label = dbscan(pts, eps, cfg.dbscan_min_points);
  std::map<int, std::size_t> sizes;
  for (int l : label)
    if (l != kNoise) ++sizes[l];
  std::vector<std::size_t> kept;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (label[k] == kNoise) continue;
    if (detail::at_least(sizes[label[k]], indices.size(), cfg.floater_min_fraction)) kept.push_back(indices[k]);
  }
  if (kept.empty()) throw TrainingError("floater filter removed every gaussian of an instance");
  return kept;
}

struct InstanceRecord {
  int id = 0;
  std::vector<MaskKey> masks;
  std::vector<std::size_t> gaussians;  // sorted
  FeatureD mean_feature = FeatureD::Zero();
};

struct DecompositionResult {
  std::vector<InstanceRecord> instances;
  std::vector<FrameTrackers> frames;
  ClusterResult clusters;
};

/// Trackers for every frame of the scene.
inline std::vector<FrameTrackers> build_all_trackers(const SplatScene& scene, const ClusterConfig& cfg = {}) {
  std::vector<FrameTrackers> frames;
  frames.reserve(scene.frames.size());
  for (const auto& f : scene.frames) frames.push_back(build_frame_trackers(scene, f, cfg));
  return frames;
}

/// Full clustering stage: trackers, merge graph, floater filtering. Instance ids are 1-based.
inline DecompositionResult build_instances(const SplatScene& scene, const ClusterConfig& cfg = {}) {
  if (scene.frames.empty()) throw InputError("scene has no frames to cluster");
  DecompositionResult out;
  out.frames = build_all_trackers(scene, cfg);
  out.clusters = cluster_masks(out.frames, cfg);
  std::map<MaskKey, const SpatialTracker*> by_key;
  for (const auto& f : out.frames)
    for (const auto& t : f.trackers) by_key[t.key] = &t;
  int next_id = 1;
  for (const auto& keys : out.clusters.clusters) {
    IndexBits u(scene.gaussians.size());
    for (const auto& k : keys) u |= by_key.at(k)->members;
    InstanceRecord rec;
    rec.id = next_id++;
    rec.masks = keys;
    rec.gaussians = filter_floaters(scene.gaussians, u.indices(), cfg);
    out.instances.push_back(std::move(rec));
  }
  return out;
}

/// Per-gaussian instance label (0 = unassigned). Overlaps resolve to the lower instance id.
inline std::vector<int> gaussian_labels(std::size_t count, const std::vector<InstanceRecord>& instances) {
  std::vector<int> label(count, 0);
  for (auto it = instances.rbegin(); it != instances.rend(); ++it)
    for (auto g : it->gaussians) label[g] = it->id;
  return label;
}

}  // namespace splitscene
