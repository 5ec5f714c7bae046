#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "splitscene/scene.hpp"

namespace splitscene {

constexpr double kDefaultCutoff = 1.0 / 255.0;
// Disks are evaluated out to 3 sigma; the tile binning uses the same bound.
constexpr double kSupportSigma = 3.0;
constexpr int kTileSize = 8;

struct DiskHit {
  double u = 0;
  double v = 0;
  double depth = 0;  // distance along the unit ray
};

/// Ray / tangent-plane intersection in the disk's (u, v) coordinates.
inline std::optional<DiskHit> intersect_disk(const Gaussian2D& g, const Vec3& origin, const Vec3& dir) {
  const Vec3 tu = g.tangent_u.cast<double>();
  const Vec3 tv = g.tangent_v.cast<double>();
  const Vec3 n = tu.cross(tv);
  const double denom = n.dot(dir);
  if (std::abs(denom) < 1e-9) return std::nullopt;
  const Vec3 p = g.center.cast<double>();
  const double tau = n.dot(p - origin) / denom;
  if (tau <= 0.0) return std::nullopt;
  const Vec3 d = origin + tau * dir - p;
  return DiskHit{d.dot(tu) / g.scale_u, d.dot(tv) / g.scale_v, tau};
}

inline double gaussian_value(double u, double v) { return std::exp(-0.5 * (u * u + v * v)); }

struct RenderOutput {
  int width = 0;
  int height = 0;
  std::vector<float> color;    // H*W*3
  std::vector<float> depth;    // H*W, camera z where accumulated alpha crosses 0.5; 0 if never
  std::vector<float> normal;   // H*W*3, blended world-space normals facing the camera
  std::vector<float> alpha;    // H*W
  std::vector<float> feature;  // H*W*16 (empty when features are not rendered)

  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  Vec3 rgb(int x, int y) const {
    const auto p = 3 * pixel(x, y);
    return {color[p], color[p + 1], color[p + 2]};
  }
  Vec3 normal_at(int x, int y) const {
    const auto p = 3 * pixel(x, y);
    return {normal[p], normal[p + 1], normal[p + 2]};
  }
  FeatureD feature_at(int x, int y) const {
    FeatureD f;
    const auto p = kFeatureDim * pixel(x, y);
    for (int k = 0; k < kFeatureDim; ++k) f[k] = feature[p + static_cast<std::size_t>(k)];
    return f;
  }
  /// Color composited over a uniform background.
  Image image(const Vec3& background = Vec3::Zero()) const {
    Image img(width, height, 3);
    for (std::size_t i = 0; i < alpha.size(); ++i)
      for (int c = 0; c < 3; ++c)
        img.data[3 * i + static_cast<std::size_t>(c)] =
            static_cast<float>(color[3 * i + static_cast<std::size_t>(c)] + (1.0 - alpha[i]) * background[c]);
    return img;
  }
};

struct Contribution {
  std::uint32_t gaussian = 0;
  float weight = 0.f;         // alpha_i G_i prod_{j<i} (1 - alpha_j G_j)
  float transmittance = 0.f;  // prod_{j<i} (1 - alpha_j G_j)
};

/// Per-pixel contributor lists in compositing order, stored compactly.
struct ContributionList {
  std::vector<std::pair<int, int>> pixels;
  std::vector<std::size_t> offsets{0};
  std::vector<Contribution> entries;

  std::size_t size() const { return pixels.size(); }
  std::span<const Contribution> at(std::size_t k) const {
    return {entries.data() + offsets[k], entries.data() + offsets[k + 1]};
  }
};

struct RenderOptions {
  double cutoff = kDefaultCutoff;
  bool features = true;
};

/// Tiled ray/disk rasterizer over a fixed set of gaussians and one camera.
class Rasterizer {
 public:
  Rasterizer(std::span<const Gaussian2D> gaussians, int sh_degree, const Camera& cam,
             double cutoff = kDefaultCutoff)
      : gs_(gaussians), sh_degree_(sh_degree), cam_(cam), cutoff_(cutoff) {
    if (!(cutoff > 0)) throw InputError("render cutoff must be positive");
    tiles_x_ = (cam.width + kTileSize - 1) / kTileSize;
    tiles_y_ = (cam.height + kTileSize - 1) / kTileSize;
    bins_.assign(static_cast<std::size_t>(tiles_x_) * tiles_y_, {});
    colors_.resize(gs_.size());
    normals_.resize(gs_.size());
    geom_.resize(gs_.size());
    const Vec3 eye = cam.center();
    for (std::size_t i = 0; i < gs_.size(); ++i) {
      const auto& g = gs_[i];
      normals_[i] = g.normal();
      geom_[i] = {g.center.cast<double>(), g.tangent_u.cast<double>(), g.tangent_v.cast<double>(), normals_[i],
                  static_cast<double>(g.scale_u), static_cast<double>(g.scale_v)};
      colors_[i] = sh::eval(sh_degree_, g.sh, (g.center.cast<double>() - eye).normalized());
      bin(i);
    }
  }

  const Camera& camera() const { return cam_; }

  /// Visits every effective contributor of pixel (px, py) front to back:
  /// visit(index, G, weight, transmittance, camera_z).
  template <class Visit>
  void trace(int px, int py, Visit&& visit) const {
    const auto [origin, dir] = cam_.ray(px, py);
    const double zscale = dir.dot(cam_.forward());
    auto& hits = scratch();
    hits.clear();
    const auto& bin = bins_[static_cast<std::size_t>(py / kTileSize) * tiles_x_ + px / kTileSize];
    for (auto idx : bin) {
      const auto& g = geom_[idx];
      const double denom = g.n.dot(dir);
      if (std::abs(denom) < 1e-9) continue;
      const double tau = g.n.dot(g.p - origin) / denom;
      if (tau <= 0.0) continue;
      const Vec3 d = origin + tau * dir - g.p;
      const double u = d.dot(g.tu) / g.su, v = d.dot(g.tv) / g.sv;
      const double r2 = u * u + v * v;
      if (r2 > kSupportSigma * kSupportSigma) continue;
      const double G = std::exp(-0.5 * r2);
      if (G < cutoff_) continue;
      hits.push_back({tau, idx, G});
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
      return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
    });
    double T = 1.0;
    for (const auto& h : hits) {
      const double a = gs_[h.index].opacity * h.G;
      const double w = a * T;
      visit(h.index, h.G, w, T, h.depth * zscale);
      T *= (1.0 - a);
    }
  }

  RenderOutput render(bool with_features = true) const {
    RenderOutput out;
    out.width = cam_.width;
    out.height = cam_.height;
    const std::size_t n = static_cast<std::size_t>(out.width) * out.height;
    out.color.assign(3 * n, 0.f);
    out.depth.assign(n, 0.f);
    out.normal.assign(3 * n, 0.f);
    out.alpha.assign(n, 0.f);
    if (with_features) out.feature.assign(kFeatureDim * n, 0.f);
    parallel_for(static_cast<std::size_t>(out.height), [&](std::size_t row) {
      const int y = static_cast<int>(row);
      for (int x = 0; x < out.width; ++x) {
        Vec3 c = Vec3::Zero(), nrm = Vec3::Zero();
        FeatureD f = FeatureD::Zero();
        double acc = 0.0, median = 0.0;
        const auto [origin, dir] = cam_.ray(x, y);
        trace(x, y, [&](std::uint32_t i, double, double w, double, double z) {
          c += w * colors_[i];
          Vec3 ni = normals_[i];
          if (ni.dot(dir) > 0) ni = -ni;
          nrm += w * ni;
          if (with_features) f += w * gs_[i].feature.cast<double>();
          acc += w;
          if (median == 0.0 && acc >= 0.5) median = z;
        });
        const std::size_t p = out.pixel(x, y);
        for (int k = 0; k < 3; ++k) {
          out.color[3 * p + static_cast<std::size_t>(k)] = static_cast<float>(c[k]);
          out.normal[3 * p + static_cast<std::size_t>(k)] = static_cast<float>(nrm[k]);
        }
        out.alpha[p] = static_cast<float>(acc);
        out.depth[p] = static_cast<float>(median);
        if (with_features)
          for (int k = 0; k < kFeatureDim; ++k)
            out.feature[kFeatureDim * p + static_cast<std::size_t>(k)] = static_cast<float>(f[k]);
      }
    });
    return out;
  }

  /// Contributors with nonzero weight for each requested pixel, in render order.
  ContributionList contributions(std::span<const std::pair<int, int>> pixels) const {
    std::vector<std::vector<Contribution>> per(pixels.size());
    parallel_for(pixels.size(), [&](std::size_t k) {
      const auto [x, y] = pixels[k];
      if (x < 0 || y < 0 || x >= cam_.width || y >= cam_.height)
        throw InputError("pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") outside image");
      trace(x, y, [&](std::uint32_t i, double, double w, double T, double) {
        if (w > 0.0) per[k].push_back({i, static_cast<float>(w), static_cast<float>(T)});
      });
    });
    ContributionList out;
    out.pixels.assign(pixels.begin(), pixels.end());
    for (const auto& v : per) {
      out.entries.insert(out.entries.end(), v.begin(), v.end());
      out.offsets.push_back(out.entries.size());
    }
    return out;
  }

  /// Contributors for every pixel, row-major.
  ContributionList contributions() const {
    std::vector<std::pair<int, int>> px;
    px.reserve(static_cast<std::size_t>(cam_.width) * cam_.height);
    for (int y = 0; y < cam_.height; ++y)
      for (int x = 0; x < cam_.width; ++x) px.emplace_back(x, y);
    return contributions(px);
  }

 private:
  struct DiskGeom {
    Vec3 p, tu, tv, n;
    double su, sv;
  };

  struct Hit {
    double depth;
    std::uint32_t index;
    double G;
  };

  static std::vector<Hit>& scratch() {
    thread_local std::vector<Hit> hits;
    return hits;
  }

  void bin(std::size_t i) {
    const auto& g = gs_[i];
    const Vec3 p = g.center.cast<double>();
    const Vec3 eu = kSupportSigma * g.scale_u * g.tangent_u.cast<double>();
    const Vec3 ev = kSupportSigma * g.scale_v * g.tangent_v.cast<double>();
    double minx = 1e300, miny = 1e300, maxx = -1e300, maxy = -1e300;
    int behind = 0;
    for (int su = -1; su <= 1; su += 2)
      for (int sv = -1; sv <= 1; sv += 2) {
        const Vec3 corner = p + su * eu + sv * ev;
        const Vec3 pc = cam_.to_camera(corner);
        if (pc.z() <= 1e-9) {
          ++behind;
          continue;
        }
        const double x = cam_.fx * pc.x() / pc.z() + cam_.cx;
        const double y = cam_.fy * pc.y() / pc.z() + cam_.cy;
        minx = std::min(minx, x);
        maxx = std::max(maxx, x);
        miny = std::min(miny, y);
        maxy = std::max(maxy, y);
      }
    if (behind == 4) return;
    int x0 = 0, y0 = 0, x1 = cam_.width - 1, y1 = cam_.height - 1;
    if (behind == 0) {
      // Pixel px samples the image plane at px + 0.5.
      x0 = static_cast<int>(std::max(0.0, std::floor(minx - 0.5)));
      y0 = static_cast<int>(std::max(0.0, std::floor(miny - 0.5)));
      x1 = static_cast<int>(std::min<double>(cam_.width - 1, std::ceil(maxx - 0.5)));
      y1 = static_cast<int>(std::min<double>(cam_.height - 1, std::ceil(maxy - 0.5)));
      if (x0 > x1 || y0 > y1) return;
    }
    for (int ty = y0 / kTileSize; ty <= y1 / kTileSize; ++ty)
      for (int tx = x0 / kTileSize; tx <= x1 / kTileSize; ++tx)
        bins_[static_cast<std::size_t>(ty) * tiles_x_ + tx].push_back(static_cast<std::uint32_t>(i));
  }

  std::span<const Gaussian2D> gs_;
  int sh_degree_;
  Camera cam_;
  double cutoff_;
  int tiles_x_ = 0, tiles_y_ = 0;
  std::vector<std::vector<std::uint32_t>> bins_;
  std::vector<Vec3> colors_;
  std::vector<Vec3> normals_;
  std::vector<DiskGeom> geom_;
};

inline RenderOutput render(const SplatScene& scene, const Camera& cam, double cutoff = kDefaultCutoff,
                           bool features = true) {
  return Rasterizer(scene.gaussians, scene.sh_degree, cam, cutoff).render(features);
}

inline RenderOutput render(std::span<const Gaussian2D> gaussians, int sh_degree, const Camera& cam,
                           double cutoff = kDefaultCutoff, bool features = true) {
  return Rasterizer(gaussians, sh_degree, cam, cutoff).render(features);
}

inline ContributionList contribution_list(const SplatScene& scene, const Camera& cam,
                                          std::span<const std::pair<int, int>> pixels,
                                          double cutoff = kDefaultCutoff) {
  return Rasterizer(scene.gaussians, scene.sh_degree, cam, cutoff).contributions(pixels);
}

}  // namespace splitscene
