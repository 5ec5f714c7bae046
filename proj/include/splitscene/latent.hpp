#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "splitscene/core.hpp"
#include "splitscene/rasterizer.hpp"
#include "splitscene/scene.hpp"

namespace splitscene {

constexpr int kLatentFactor = 8;

/// Per-view grid of latent vectors with a known/unknown flag per cell.
struct LatentGrid {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<double> data;         // ((y * width) + x) * channels + c
  std::vector<std::uint8_t> known;  // one flag per cell

  LatentGrid() = default;
  LatentGrid(int w, int h, int c = 3)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, 0.0),
        known(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t cells() const { return static_cast<std::size_t>(width) * height; }
  std::size_t cell(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  double& at(int x, int y, int c) { return data[cell(x, y) * channels + c]; }
  double at(int x, int y, int c) const { return data[cell(x, y) * channels + c]; }
  bool same_shape(const LatentGrid& o) const { return width == o.width && height == o.height && channels == o.channels; }
};

/// Average-pools an image by `factor` into a latent grid.
inline LatentGrid encode(const Image& img, int factor = kLatentFactor) {
  if (img.width % factor || img.height % factor)
    throw InputError("image size " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     " is not a multiple of the latent factor");
  LatentGrid g(img.width / factor, img.height / factor, img.channels);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double s = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) s += img.at(x * factor + dx, y * factor + dy, c);
        g.at(x, y, c) = s * inv;
      }
  return g;
}

/// Nearest-neighbour upsampling back to image resolution.
inline Image decode(const LatentGrid& g, int factor = kLatentFactor) {
  Image img(g.width * factor, g.height * factor, g.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < g.channels; ++c) img.at(x, y, c) = static_cast<float>(g.at(x / factor, y / factor, c));
  return img;
}

/// Surface geometry per latent cell: camera depth (0 = none) and world normal.
struct ViewGeometry {
  Camera camera;  // latent-resolution camera
  std::vector<double> depth;
  std::vector<Vec3> normals;
};

/// Geometry from a render at latent resolution; cells with alpha <= 0.5 carry no surface.
inline ViewGeometry geometry_from_render(const RenderOutput& r, const Camera& latent_cam) {
  ViewGeometry g{latent_cam, std::vector<double>(static_cast<std::size_t>(r.width) * r.height, 0.0),
                 std::vector<Vec3>(static_cast<std::size_t>(r.width) * r.height, Vec3::Zero())};
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      const std::size_t p = r.pixel(x, y);
      if (r.alpha[p] <= 0.5f || r.depth[p] <= 0.f) continue;
      g.depth[p] = r.depth[p];
      const Vec3 n = r.normal_at(x, y);
      g.normals[p] = n.norm() > 1e-12 ? Vec3(n.normalized()) : Vec3::Zero();
    }
  return g;
}

struct WarpWrite {
  int src_x = 0, src_y = 0;
  int dst_x = 0, dst_y = 0;
  Vec3 point;
};

struct WarpResult {
  LatentGrid grid;            // known cells carry warped latents
  std::vector<double> depth;  // target-view depth of the written surface
  std::size_t written = 0;
  std::size_t backfacing = 0;
  std::vector<WarpWrite> writes;  // filled when tracing is requested
};

inline WarpResult empty_warp(const Camera& target, int channels) {
  WarpResult r;
  r.grid = LatentGrid(target.width, target.height, channels);
  r.depth.assign(r.grid.cells(), std::numeric_limits<double>::infinity());
  return r;
}

/// Warps source latents into `acc`: back-projects each source cell with depth, drops surfaces
/// facing away from the target camera, writes the nearest target cell, nearer depth wins.
inline void warp_into(WarpResult& acc, const LatentGrid& source, const ViewGeometry& geo, const Camera& target,
                      bool trace = false) {
  if (source.width != geo.camera.width || source.height != geo.camera.height)
    throw InputError("latent grid and geometry differ in size");
  if (acc.grid.width != target.width || acc.grid.height != target.height || acc.grid.channels != source.channels)
    throw InputError("warp accumulator does not match target grid");
  const Vec3 eye = target.center();
  const Vec3 src_fwd = geo.camera.forward();
  for (int y = 0; y < source.height; ++y)
    for (int x = 0; x < source.width; ++x) {
      const std::size_t sc = source.cell(x, y);
      const double d = geo.depth[sc];
      if (!(d > 0)) continue;
      const auto [o, dir] = geo.camera.ray(x, y);
      const Vec3 X = o + dir * (d / dir.dot(src_fwd));
      const Vec3& n = geo.normals[sc];
      if (n.squaredNorm() == 0.0 || n.dot(X - eye) >= 0.0) {
        ++acc.backfacing;
        continue;
      }
      const auto proj = target.project(X);
      if (!proj) continue;
      const int u = static_cast<int>(std::floor((*proj)[0]));
      const int v = static_cast<int>(std::floor((*proj)[1]));
      if (u < 0 || v < 0 || u >= target.width || v >= target.height) continue;
      const std::size_t tc = acc.grid.cell(u, v);
      if ((*proj)[2] >= acc.depth[tc]) continue;
      acc.depth[tc] = (*proj)[2];
      if (!acc.grid.known[tc]) ++acc.written;
      acc.grid.known[tc] = 1;
      for (int c = 0; c < source.channels; ++c) acc.grid.at(u, v, c) = source.at(x, y, c);
      if (trace) acc.writes.push_back({x, y, u, v, X});
    }
}

inline WarpResult warp_latents(const LatentGrid& source, const ViewGeometry& geo, const Camera& target, bool trace = false) {
  WarpResult r = empty_warp(target, source.channels);
  warp_into(r, source, geo, target, trace);
  return r;
}

}  // namespace splitscene
