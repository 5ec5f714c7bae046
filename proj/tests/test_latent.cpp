#include <gtest/gtest.h>

#include <random>

#include "splitscene/latent.hpp"
#include "splitscene/viewpoints.hpp"
#include "splitscene/synth.hpp"

using namespace splitscene;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Sphere {
  Vec3 c = Vec3::Zero();
  double r = 0.5;
};

// Closed-form ray/sphere hit: nearest positive root, camera z depth and outward normal.
ViewGeometry sphere_geometry(const Sphere& s, const Camera& cam) {
  ViewGeometry g{cam, std::vector<double>(static_cast<std::size_t>(cam.width) * cam.height, 0.0),
                 std::vector<Vec3>(static_cast<std::size_t>(cam.width) * cam.height, Vec3::Zero())};
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const auto [o, d] = cam.ray(x, y);
      const Vec3 oc = o - s.c;
      const double b = oc.dot(d), disc = b * b - (oc.squaredNorm() - s.r * s.r);
      if (disc < 0) continue;
      const double t = -b - std::sqrt(disc);
      if (t <= 0) continue;
      const Vec3 X = o + t * d;
      const std::size_t k = static_cast<std::size_t>(y) * cam.width + x;
      g.depth[k] = (X - o).dot(cam.forward());
      g.normals[k] = (X - s.c).normalized();
    }
  return g;
}

// Pinhole projection written out from the look_at construction.
Eigen::Vector2d pinhole(const Vec3& eye, const Vec3& target, double fov_y, int w, int h, const Vec3& X) {
  const Vec3 f = (target - eye).normalized();
  const Vec3 r = f.cross(Vec3::UnitZ()).normalized();
  const Vec3 d = f.cross(r);
  const Vec3 q = X - eye;
  const double focal = 0.5 * h / std::tan(0.5 * fov_y);
  return {focal * q.dot(r) / q.dot(f) + 0.5 * w, focal * q.dot(d) / q.dot(f) + 0.5 * h};
}

LatentGrid ramp(int w, int h) {
  LatentGrid g(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) g.at(x, y, c) = x + 100.0 * y + 0.25 * c;
  return g;
}

}  // namespace

TEST(Latent, EncodeAveragesBlocks) {
  Image img(16, 8, 3);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = x < 8 ? 1.f : static_cast<float>(x % 2);
  const auto g = encode(img);
  ASSERT_EQ(g.width, 2);
  ASSERT_EQ(g.height, 1);
  EXPECT_DOUBLE_EQ(g.at(0, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(g.at(1, 0, 2), 0.5);
  const auto back = decode(g);
  EXPECT_EQ(back.width, 16);
  EXPECT_FLOAT_EQ(back.at(15, 7, 1), 0.5f);
  EXPECT_THROW(encode(Image(12, 8, 3)), InputError);
}

TEST(Latent, IdentityWarp) {
  const Sphere s;
  const Camera cam = Camera::look_at(Vec3(0, -2, 0.3), s.c, Vec3::UnitZ(), 16, 16, 50 * kPi / 180);
  const auto geo = sphere_geometry(s, cam);
  const auto src = ramp(16, 16);
  const auto w = warp_latents(src, geo, cam);
  EXPECT_EQ(w.backfacing, 0u);
  std::size_t valid = 0;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const auto k = src.cell(x, y);
      const bool has = geo.depth[k] > 0;
      valid += has;
      EXPECT_EQ(w.grid.known[k] != 0, has) << x << ',' << y;
      if (has)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(w.grid.at(x, y, c), src.at(x, y, c));
    }
  EXPECT_GT(valid, 50u);
  EXPECT_EQ(w.written, valid);
}

TEST(Latent, PlaneSeenFromBehindIsDiscarded) {
  // A plane facing -y seen from the front, then warped into a camera behind it.
  const Camera front = Camera::look_at(Vec3(0, -2, 0), Vec3::Zero(), Vec3::UnitZ(), 8, 8, 40 * kPi / 180);
  const Camera back = Camera::look_at(Vec3(0, 2, 0), Vec3::Zero(), Vec3::UnitZ(), 8, 8, 40 * kPi / 180);
  ViewGeometry geo{front, std::vector<double>(64, 2.0), std::vector<Vec3>(64, Vec3(0, -1, 0))};
  const auto w = warp_latents(ramp(8, 8), geo, back);
  EXPECT_EQ(w.written, 0u);
  EXPECT_EQ(w.backfacing, 64u);
  for (auto k : w.grid.known) EXPECT_EQ(k, 0);
}

TEST(Latent, SphereWarpMatchesProjection) {
  const Sphere s{Vec3(0.1, -0.2, 0.3), 0.4};
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> az(0, 2 * kPi), el(-0.6, 0.9), dist(1.5, 3.0);
  const double fov = 50 * kPi / 180;
  double worst = 0.0;
  std::size_t writes = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto eye = [&] {
      const double a = az(rng), e = el(rng), r = dist(rng);
      return Vec3(s.c + r * Vec3(std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e)));
    };
    const Vec3 es = eye(), et = eye();
    const Camera src = Camera::look_at(es, s.c, Vec3::UnitZ(), 24, 24, fov);
    const Camera dst = Camera::look_at(et, s.c, Vec3::UnitZ(), 24, 24, fov);
    const auto w = warp_latents(ramp(24, 24), sphere_geometry(s, src), dst, true);
    for (const auto& wr : w.writes) {
      const Vec3 n = (wr.point - s.c).normalized();
      ASSERT_LT(n.dot(wr.point - et), 0.0) << "back-facing write";
      const auto p = pinhole(et, s.c, fov, 24, 24, wr.point);
      worst = std::max({worst, std::abs(p.x() - (wr.dst_x + 0.5)), std::abs(p.y() - (wr.dst_y + 0.5))});
    }
    writes += w.writes.size();
  }
  EXPECT_GT(writes, 300u);
  EXPECT_LE(worst, 0.5);
}

TEST(Latent, GeometryFromRenderedSphere) {
  // Rendered depth of a dense splat sphere stays close to the closed form.
  const auto disks = synth::make_sphere(Vec3::Zero(), 0.5, 3000, Vec3(0.5, 0.5, 0.5));
  const Camera cam = Camera::look_at(Vec3(0, -2, 0), Vec3::Zero(), Vec3::UnitZ(), 16, 16, 40 * kPi / 180);
  const auto geo = geometry_from_render(render(disks, 0, cam, kDefaultCutoff, false), cam);
  const auto exact = sphere_geometry({Vec3::Zero(), 0.5}, cam);
  int both = 0;
  for (std::size_t k = 0; k < geo.depth.size(); ++k) {
    if (geo.depth[k] <= 0 || exact.depth[k] <= 0) continue;
    ++both;
    EXPECT_NEAR(geo.depth[k], exact.depth[k], 0.05);
    EXPECT_GT(geo.normals[k].dot(exact.normals[k]), 0.8);
  }
  EXPECT_GT(both, 60);
}

TEST(Latent, ShapeMismatchRejected) {
  const Camera cam = Camera::look_at(Vec3(0, -2, 0), Vec3::Zero(), Vec3::UnitZ(), 8, 8, 1.0);
  ViewGeometry geo{cam, std::vector<double>(64, 0.0), std::vector<Vec3>(64, Vec3::Zero())};
  EXPECT_THROW(warp_latents(ramp(4, 4), geo, cam), InputError);
  WarpResult acc = empty_warp(cam, 1);
  EXPECT_THROW(warp_into(acc, ramp(8, 8), geo, cam), InputError);
}

TEST(Viewpoints, RingAroundInstance) {
  const auto disks = synth::make_sphere(Vec3(1, 2, 3), 0.5, 200, Vec3(0.5, 0.5, 0.5));
  ViewpointConfig cfg;
  const auto poses = propose_viewpoints(disks, cfg);
  ASSERT_EQ(poses.size(), 16u);
  const Vec3 c = centroid(disks);
  for (const auto& p : poses) {
    EXPECT_NEAR((p.center() - c).normalized().z(), std::sin(30 * kPi / 180), 1e-9);
    const auto proj = p.project(c);
    ASSERT_TRUE(proj);
    EXPECT_NEAR((*proj)[0], 64.0, 1e-9);
  }
  EXPECT_THROW(propose_viewpoints({}), InputError);
}

TEST(Viewpoints, ClassifyKeepsMinimumConditions) {
  ViewpointPlan plan;
  plan.occlusion = {0.9, 0.3, 0.01, 0.6};
  classify_views(plan, 0.05, 2);
  EXPECT_EQ(plan.conditions, (std::vector<int>{1, 2}));
  EXPECT_EQ(plan.targets, (std::vector<int>{0, 3}));
  plan.occlusion = {0.0, 0.02, 0.04, 0.6};
  classify_views(plan, 0.05, 2);
  EXPECT_EQ(plan.conditions, (std::vector<int>{0, 1, 2}));
}
