#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "splitscene/core.hpp"

namespace splitscene {

/// Row-major H×W×C float image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool empty() const { return data.empty(); }
  bool operator==(const Image&) const = default;
};

/// Per-pixel instance labels; 0 marks unlabeled pixels.
struct LabelMap {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  LabelMap(int w, int h) : width(w), height(h), labels(static_cast<std::size_t>(w) * h, 0) {}

  std::uint16_t& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  /// Sorted distinct positive labels.
  std::vector<int> ids() const {
    std::set<int> s;
    for (auto l : labels)
      if (l != 0) s.insert(l);
    return {s.begin(), s.end()};
  }
  bool empty() const { return labels.empty(); }
  bool operator==(const LabelMap&) const = default;
};

/// One planar gaussian disk. Stored in single precision so the container round-trips bit-exactly.
struct Gaussian2D {
  Vec3f center = Vec3f::Zero();
  Vec3f tangent_u = Vec3f::UnitX();
  Vec3f tangent_v = Vec3f::UnitY();
  float scale_u = 1.f;
  float scale_v = 1.f;
  float opacity = 1.f;
  // (degree+1)^2 coefficients per channel, laid out coefficient-major: [coef][rgb].
  std::vector<float> sh = std::vector<float>(3, 0.f);
  Feature feature = Feature::Zero();

  Vec3 normal() const { return tangent_u.cast<double>().cross(tangent_v.cast<double>()); }

  bool operator==(const Gaussian2D& o) const {
    return center == o.center && tangent_u == o.tangent_u && tangent_v == o.tangent_v &&
           scale_u == o.scale_u && scale_v == o.scale_v && opacity == o.opacity && sh == o.sh &&
           feature == o.feature;
  }
};

inline constexpr int sh_coefficient_count(int degree) { return (degree + 1) * (degree + 1); }

namespace sh {
constexpr double kC0 = 0.28209479177387814;
constexpr double kC1 = 0.4886025119029199;
constexpr std::array<double, 5> kC2 = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                       -1.0925484305920792, 0.5462742152960396};
constexpr std::array<double, 7> kC3 = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                       0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                       -0.5900435899266435};

/// Real SH basis values for a unit direction, up to the given degree.
inline std::vector<double> basis(int degree, const Vec3& dir) {
  std::vector<double> b(static_cast<std::size_t>(sh_coefficient_count(degree)));
  const double x = dir.x(), y = dir.y(), z = dir.z();
  b[0] = kC0;
  if (degree >= 1) {
    b[1] = -kC1 * y;
    b[2] = kC1 * z;
    b[3] = -kC1 * x;
  }
  if (degree >= 2) {
    const double xx = x * x, yy = y * y, zz = z * z, xy = x * y, yz = y * z, xz = x * z;
    b[4] = kC2[0] * xy;
    b[5] = kC2[1] * yz;
    b[6] = kC2[2] * (2.0 * zz - xx - yy);
    b[7] = kC2[3] * xz;
    b[8] = kC2[4] * (xx - yy);
    if (degree >= 3) {
      b[9] = kC3[0] * y * (3 * xx - yy);
      b[10] = kC3[1] * xy * z;
      b[11] = kC3[2] * y * (4 * zz - xx - yy);
      b[12] = kC3[3] * z * (2 * zz - 3 * xx - 3 * yy);
      b[13] = kC3[4] * x * (4 * zz - xx - yy);
      b[14] = kC3[5] * z * (xx - yy);
      b[15] = kC3[6] * x * (xx - 3 * yy);
    }
  }
  return b;
}

/// Gradient of every basis function with respect to the (unnormalized) direction components.
inline std::vector<Vec3> basis_gradient(int degree, const Vec3& dir) {
  std::vector<Vec3> g(static_cast<std::size_t>(sh_coefficient_count(degree)), Vec3::Zero());
  const double x = dir.x(), y = dir.y(), z = dir.z();
  if (degree >= 1) {
    g[1] = Vec3(0, -kC1, 0);
    g[2] = Vec3(0, 0, kC1);
    g[3] = Vec3(-kC1, 0, 0);
  }
  if (degree >= 2) {
    g[4] = kC2[0] * Vec3(y, x, 0);
    g[5] = kC2[1] * Vec3(0, z, y);
    g[6] = kC2[2] * Vec3(-2 * x, -2 * y, 4 * z);
    g[7] = kC2[3] * Vec3(z, 0, x);
    g[8] = kC2[4] * Vec3(2 * x, -2 * y, 0);
  }
  if (degree >= 3) {
    const double xx = x * x, yy = y * y, zz = z * z;
    g[9] = kC3[0] * Vec3(6 * x * y, 3 * xx - 3 * yy, 0);
    g[10] = kC3[1] * Vec3(y * z, x * z, x * y);
    g[11] = kC3[2] * Vec3(-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z);
    g[12] = kC3[3] * Vec3(-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy);
    g[13] = kC3[4] * Vec3(4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z);
    g[14] = kC3[5] * Vec3(2 * x * z, -2 * y * z, xx - yy);
    g[15] = kC3[6] * Vec3(3 * xx - 3 * yy, -6 * x * y, 0);
  }
  return g;
}

/// View-dependent color (offset by 0.5, clamped at zero like common splat renderers).
inline Vec3 eval(int degree, const std::vector<float>& coeffs, const Vec3& dir) {
  Vec3 c(0.5, 0.5, 0.5);
  if (degree == 0) {
    for (int ch = 0; ch < 3; ++ch) c[ch] += kC0 * coeffs[ch];
  } else {
    const auto b = basis(degree, dir);
    for (std::size_t k = 0; k < b.size(); ++k)
      for (int ch = 0; ch < 3; ++ch) c[ch] += b[k] * coeffs[k * 3 + ch];
  }
  return c.cwiseMax(0.0);
}

/// DC coefficients that render as the given RGB color.
inline std::array<float, 3> dc_from_rgb(const Vec3& rgb) {
  return {static_cast<float>((rgb[0] - 0.5) / kC0), static_cast<float>((rgb[1] - 0.5) / kC0),
          static_cast<float>((rgb[2] - 0.5) / kC0)};
}
}  // namespace sh

inline void set_rgb(Gaussian2D& g, const Vec3& rgb, int degree = 0) {
  g.sh.assign(static_cast<std::size_t>(sh_coefficient_count(degree)) * 3, 0.f);
  const auto dc = sh::dc_from_rgb(rgb);
  std::copy(dc.begin(), dc.end(), g.sh.begin());
}

/// Pinhole camera; world_to_camera maps x_cam = R x_world + t. Camera looks down +z, y down.
struct Camera {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 center() const { return -R.transpose() * t; }
  Vec3 forward() const { return R.row(2).transpose(); }

  /// Unit world-space ray through the center of pixel (px, py).
  std::pair<Vec3, Vec3> ray(double px, double py) const {
    const Vec3 dc((px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy, 1.0);
    return {center(), (R.transpose() * dc).normalized()};
  }

  Vec3 to_camera(const Vec3& world) const { return R * world + t; }

  /// Continuous pixel coordinates (pixel centers at integer + 0.5) and camera depth.
  std::optional<Vec3> project(const Vec3& world) const {
    const Vec3 pc = to_camera(world);
    if (pc.z() <= 1e-12) return std::nullopt;
    return Vec3(fx * pc.x() / pc.z() + cx, fy * pc.y() / pc.z() + cy, pc.z());
  }

  /// Same pose with the image plane resampled by `factor` (e.g. 1/8 for latent grids).
  Camera scaled(double factor) const {
    Camera c = *this;
    c.fx *= factor;
    c.fy *= factor;
    c.cx *= factor;
    c.cy *= factor;
    c.width = static_cast<int>(std::lround(width * factor));
    c.height = static_cast<int>(std::lround(height * factor));
    return c;
  }

  Eigen::Isometry3d world_to_camera() const {
    Eigen::Isometry3d T = Eigen::Isometry3d::Identity();
    T.linear() = R;
    T.translation() = t;
    return T;
  }

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height,
                        double fov_y_rad) {
    const Vec3 fwd = (target - eye).normalized();
    Vec3 right = fwd.cross(up);
    if (right.norm() < 1e-9) right = fwd.cross(Vec3::UnitY());
    right.normalize();
    const Vec3 down = fwd.cross(right);
    Camera c;
    c.R.row(0) = right.transpose();
    c.R.row(1) = down.transpose();
    c.R.row(2) = fwd.transpose();
    c.t = -c.R * eye;
    c.width = width;
    c.height = height;
    c.fy = 0.5 * height / std::tan(0.5 * fov_y_rad);
    c.fx = c.fy;
    c.cx = 0.5 * width;
    c.cy = 0.5 * height;
    return c;
  }

  bool operator==(const Camera&) const = default;
};

struct Frame {
  int index = 0;
  Camera camera;
  Image image;  // may be empty when only masks are available
  LabelMap mask_map;
};

struct SplatScene {
  std::vector<Gaussian2D> gaussians;
  int sh_degree = 0;
  std::vector<Frame> frames;
  double scene_scale = 1.0;

  const Frame* frame(int index) const {
    for (const auto& f : frames)
      if (f.index == index) return &f;
    return nullptr;
  }
};

/// Mean of gaussian centers.
inline Vec3 centroid(const std::vector<Gaussian2D>& gs) {
  Vec3 c = Vec3::Zero();
  for (const auto& g : gs) c += g.center.cast<double>();
  return gs.empty() ? c : Vec3(c / static_cast<double>(gs.size()));
}

/// Median camera-to-centroid distance; falls back to the centroid bounding radius without frames.
inline double compute_scene_scale(const SplatScene& s) {
  const Vec3 c = centroid(s.gaussians);
  std::vector<double> d;
  for (const auto& f : s.frames) d.push_back((f.camera.center() - c).norm());
  if (d.empty())
    for (const auto& g : s.gaussians) d.push_back((g.center.cast<double>() - c).norm());
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const double m = d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
  return m > 0 ? m : 1.0;
}

inline void validate(const Gaussian2D& g, std::size_t index, int sh_degree) {
  auto fail = [&](const std::string& what) {
    throw InputError("gaussian " + std::to_string(index) + ": " + what);
  };
  constexpr double tol = 1e-6;
  if (!g.center.allFinite()) fail("center is not finite");
  if (std::abs(g.tangent_u.cast<double>().norm() - 1.0) > tol) fail("tangent_u is not unit length");
  if (std::abs(g.tangent_v.cast<double>().norm() - 1.0) > tol) fail("tangent_v is not unit length");
  if (std::abs(g.tangent_u.cast<double>().dot(g.tangent_v.cast<double>())) > tol)
    fail("tangents are not orthogonal");
  if (!(g.scale_u > 0.f)) fail("scale_u must be positive");
  if (!(g.scale_v > 0.f)) fail("scale_v must be positive");
  if (!(g.opacity >= 0.f && g.opacity <= 1.f))
    fail("opacity " + std::to_string(g.opacity) + " outside [0,1]");
  if (g.sh.size() != static_cast<std::size_t>(sh_coefficient_count(sh_degree)) * 3)
    fail("color block size does not match SH degree");
  if (!g.feature.allFinite()) fail("feature is not finite");
}

inline void validate(const Camera& c, const std::string& where) {
  if (!(c.fx > 0 && c.fy > 0)) throw InputError(where + ": focal lengths must be positive");
  if (c.width <= 0 || c.height <= 0) throw InputError(where + ": image size must be positive");
  if (!(c.R * c.R.transpose()).isIdentity(1e-6) || std::abs(c.R.determinant() - 1.0) > 1e-6)
    throw InputError(where + ": rotation is not orthonormal with determinant +1");
}

inline void validate(const SplatScene& s) {
  if (s.gaussians.empty()) throw InputError("scene has no gaussians");
  if (s.sh_degree < 0 || s.sh_degree > 3) throw InputError("SH degree must be in 0..3");
  for (std::size_t i = 0; i < s.gaussians.size(); ++i) validate(s.gaussians[i], i, s.sh_degree);
  std::set<int> seen;
  for (const auto& f : s.frames) {
    const std::string where = "frame " + std::to_string(f.index);
    if (!seen.insert(f.index).second) throw InputError(where + ": duplicate frame index");
    validate(f.camera, where);
    if (!f.mask_map.empty() &&
        (f.mask_map.width != f.camera.width || f.mask_map.height != f.camera.height))
      throw InputError(where + ": mask size differs from camera size");
    const auto ids = f.mask_map.ids();
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (ids[k] != static_cast<int>(k) + 1)
        throw InputError(where + ": mask labels are not dense from 1");
    if (!f.image.empty() && (f.image.width != f.camera.width || f.image.height != f.camera.height))
      throw InputError(where + ": image size differs from camera size");
  }
}

}  // namespace splitscene
