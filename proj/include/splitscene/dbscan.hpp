#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>
#include <vector>

#include "splitscene/core.hpp"

namespace splitscene {

constexpr int kNoise = -1;

namespace detail {

/// Uniform hash grid for fixed-radius neighbor queries.
class PointGrid {
 public:
  PointGrid(const std::vector<Vec3>& pts, double cell) : pts_(pts), cell_(cell) {
    for (std::size_t i = 0; i < pts.size(); ++i) cells_[key(coord(pts[i]))].push_back(i);
  }

  template <class Fn>
  void for_each_within(const Vec3& q, double radius, Fn&& fn) const {
    const auto c = coord(q);
    const int reach = static_cast<int>(std::ceil(radius / cell_));
    const double r2 = radius * radius;
    for (int dx = -reach; dx <= reach; ++dx)
      for (int dy = -reach; dy <= reach; ++dy)
        for (int dz = -reach; dz <= reach; ++dz) {
          const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == cells_.end()) continue;
          for (auto j : it->second)
            if ((pts_[j] - q).squaredNorm() <= r2) fn(j);
        }
  }

 private:
  std::array<std::int64_t, 3> coord(const Vec3& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell_)), static_cast<std::int64_t>(std::floor(p.y() / cell_)),
            static_cast<std::int64_t>(std::floor(p.z() / cell_))};
  }
  static std::uint64_t key(const std::array<std::int64_t, 3>& c) {
    return (static_cast<std::uint64_t>(c[0]) * 73856093u) ^ (static_cast<std::uint64_t>(c[1]) * 19349663u) ^
           (static_cast<std::uint64_t>(c[2]) * 83492791u);
  }

  const std::vector<Vec3>& pts_;
  double cell_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

}  // namespace detail

/// Median over points of the distance to their nearest other point. Zero for < 2 points.
inline double median_nearest_neighbor(const std::vector<Vec3>& pts) {
  if (pts.size() < 2) return 0.0;
  std::vector<double> nn(pts.size(), std::numeric_limits<double>::infinity());
  parallel_for(pts.size(), [&](std::size_t i) {
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) nn[i] = std::min(nn[i], (pts[i] - pts[j]).squaredNorm());
  });
  std::nth_element(nn.begin(), nn.begin() + static_cast<std::ptrdiff_t>(nn.size() / 2), nn.end());
  return std::sqrt(nn[nn.size() / 2]);
}

/// Density clustering. Returns a cluster id per point (0-based, in discovery order) or kNoise.
/// A point is core when its eps-neighborhood, itself included, holds at least min_pts points.
inline std::vector<int> dbscan(const std::vector<Vec3>& pts, double eps, int min_pts) {
  std::vector<int> label(pts.size(), kNoise);
  if (pts.empty()) return label;
  if (!(eps > 0)) {
    // Zero spread: every point coincides with its neighbors.
    if (static_cast<int>(pts.size()) >= min_pts) std::fill(label.begin(), label.end(), 0);
    return label;
  }
  const detail::PointGrid grid(pts, eps);
  std::vector<std::vector<std::size_t>> nbrs(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) grid.for_each_within(pts[i], eps, [&](std::size_t j) { nbrs[i].push_back(j); });
  std::vector<bool> visited(pts.size(), false);
  int cluster = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (visited[i] || static_cast<int>(nbrs[i].size()) < min_pts) continue;
    std::vector<std::size_t> stack{i};
    visited[i] = true;
    label[i] = cluster;
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      if (static_cast<int>(nbrs[p].size()) < min_pts) continue;  // border point: no expansion
      for (auto q : nbrs[p]) {
        if (label[q] == kNoise) label[q] = cluster;
        if (!visited[q]) {
          visited[q] = true;
          stack.push_back(q);
        }
      }
    }
    ++cluster;
  }
  return label;
}

}  // namespace splitscene
