#include <gtest/gtest.h>

#include "oracle.hpp"
#include "splitscene/rasterizer.hpp"
#include "splitscene/synth.hpp"

using namespace splitscene;

namespace {

// 3x3 camera at the origin looking down +y; pixel (1, 1) looks straight along the axis.
Camera axis_camera() { return Camera::look_at(Vec3::Zero(), Vec3(0, 1, 0), Vec3::UnitZ(), 3, 3, 1.0); }

Gaussian2D facing_disk(double y, double opacity, const Vec3& rgb, double scale = 0.2) {
  return synth::make_disk(Vec3(0, y, 0), Vec3(0, -1, 0), scale, opacity, rgb);
}

}  // namespace

TEST(Rasterizer, SingleDiskAtCenterPixel) {
  const std::vector<Gaussian2D> gs{facing_disk(2.0, 0.8, Vec3(1, 0, 0))};
  const auto r = render(gs, 0, axis_camera());
  const Vec3 c = r.rgb(1, 1);
  EXPECT_NEAR(c[0], 0.8, 1e-6);
  EXPECT_NEAR(c[1], 0.0, 1e-6);
  EXPECT_NEAR(r.alpha[r.pixel(1, 1)], 0.8, 1e-6);
  EXPECT_NEAR(r.depth[r.pixel(1, 1)], 2.0, 1e-6);
}

TEST(Rasterizer, TwoDisksCompositeFrontToBack) {
  // front red at 0.6, back green at 0.5: C = 0.6 red + 0.4 * 0.5 green
  const std::vector<Gaussian2D> gs{facing_disk(3.0, 0.5, Vec3(0, 1, 0)), facing_disk(2.0, 0.6, Vec3(1, 0, 0))};
  const auto r = render(gs, 0, axis_camera());
  const Vec3 c = r.rgb(1, 1);
  EXPECT_NEAR(c[0], 0.6, 1e-6);
  EXPECT_NEAR(c[1], 0.2, 1e-6);
  EXPECT_NEAR(c[2], 0.0, 1e-6);
  EXPECT_NEAR(r.alpha[r.pixel(1, 1)], 0.8, 1e-6);
  EXPECT_NEAR(r.depth[r.pixel(1, 1)], 2.0, 1e-6);  // accumulated alpha passes 0.5 at the front disk
}

TEST(Rasterizer, MedianDepthSkipsFaintFrontLayer) {
  const std::vector<Gaussian2D> gs{facing_disk(2.0, 0.3, Vec3(1, 1, 1)), facing_disk(3.0, 0.9, Vec3(1, 1, 1))};
  const auto r = render(gs, 0, axis_camera());
  EXPECT_NEAR(r.depth[r.pixel(1, 1)], 3.0, 1e-6);
}

TEST(Rasterizer, DcCoefficientOffsetByHalf) {
  Gaussian2D g = facing_disk(2.0, 1.0, Vec3(0.5, 0.5, 0.5));
  g.sh = {1.f, 0.f, -3.f};
  const auto r = render(std::vector<Gaussian2D>{g}, 0, axis_camera());
  EXPECT_NEAR(r.rgb(1, 1)[0], 0.7820947917738781, 1e-6);
  EXPECT_NEAR(r.rgb(1, 1)[1], 0.5, 1e-6);
  EXPECT_NEAR(r.rgb(1, 1)[2], 0.0, 1e-6);  // clamped at zero
}

TEST(Rasterizer, EqualDepthBrokenByIndex) {
  const std::vector<Gaussian2D> gs{facing_disk(2.0, 0.5, Vec3(1, 0, 0)), facing_disk(2.0, 0.5, Vec3(0, 1, 0))};
  const auto r = render(gs, 0, axis_camera());
  EXPECT_NEAR(r.rgb(1, 1)[0], 0.5, 1e-6);
  EXPECT_NEAR(r.rgb(1, 1)[1], 0.25, 1e-6);
}

TEST(Rasterizer, SupportAndCutoffBounds) {
  const Camera cam = axis_camera();
  const auto [o, d] = cam.ray(2, 1);
  const double off = (o + d * (2.0 / d.y())).x();
  auto alpha_at = [&](double radius_in_scales, double cutoff) {
    const std::vector<Gaussian2D> gs{facing_disk(2.0, 1.0, Vec3(1, 1, 1), off / radius_in_scales)};
    const auto r = render(gs, 0, cam, cutoff);
    return r.alpha[r.pixel(2, 1)];
  };
  EXPECT_NEAR(alpha_at(2.9, kDefaultCutoff), std::exp(-0.5 * 2.9 * 2.9), 1e-6);
  EXPECT_EQ(alpha_at(3.1, kDefaultCutoff), 0.f);  // outside 3 sigma
  EXPECT_EQ(alpha_at(2.9, 0.05), 0.f);            // G = 0.0149 below the cutoff
}

TEST(Rasterizer, NormalsFaceTheCamera) {
  Gaussian2D g = facing_disk(2.0, 1.0, Vec3(1, 1, 1));
  std::swap(g.tangent_u, g.tangent_v);  // flips the geometric normal away from the camera
  ASSERT_GT(g.normal().y(), 0.0);
  const auto r = render(std::vector<Gaussian2D>{g}, 0, axis_camera());
  EXPECT_NEAR(r.normal_at(1, 1).y(), -1.0, 1e-6);
}

TEST(Rasterizer, DisksBehindCameraIgnored) {
  const std::vector<Gaussian2D> gs{facing_disk(-2.0, 1.0, Vec3(1, 1, 1))};
  const auto r = render(gs, 0, axis_camera());
  for (float a : r.alpha) EXPECT_EQ(a, 0.f);
}

TEST(Rasterizer, FeaturesBlendLikeColor) {
  Gaussian2D a = facing_disk(2.0, 0.6, Vec3(1, 0, 0)), b = facing_disk(3.0, 0.5, Vec3(0, 1, 0));
  a.feature = Feature::Zero();
  b.feature = Feature::Zero();
  a.feature[0] = 1.f;
  b.feature[1] = 1.f;
  const auto r = render(std::vector<Gaussian2D>{a, b}, 0, axis_camera());
  EXPECT_NEAR(r.feature_at(1, 1)[0], 0.6, 1e-6);
  EXPECT_NEAR(r.feature_at(1, 1)[1], 0.2, 1e-6);
}

TEST(Rasterizer, MatchesNaiveCompositor) {
  std::mt19937_64 rng(7);
  const Camera cam = oracle::front_camera();
  double worst = 0.0;
  for (int s = 0; s < 25; ++s) {
    const auto gs = oracle::random_disks(rng, 10);
    const auto r = render(gs, 0, cam, kDefaultCutoff, false);
    const auto ref = oracle::composite(gs, cam);
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        const auto& p = ref[r.pixel(x, y)];
        worst = std::max(worst, (r.rgb(x, y) - p.color).cwiseAbs().maxCoeff());
        worst = std::max(worst, std::abs(r.alpha[r.pixel(x, y)] - p.alpha));
      }
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Rasterizer, ContributionWeightsMatchRender) {
  std::mt19937_64 rng(3);
  const auto gs = oracle::random_disks(rng, 12);
  const Camera cam = oracle::front_camera(16, 12);
  SplatScene scene;
  scene.gaussians = gs;
  const auto r = render(scene, cam, kDefaultCutoff, false);
  const Rasterizer rast(gs, 0, cam);
  const auto list = rast.contributions();
  ASSERT_EQ(list.size(), static_cast<std::size_t>(16 * 12));
  for (std::size_t k = 0; k < list.size(); ++k) {
    double sum = 0.0, T = 1.0;
    for (const auto& c : list.at(k)) {
      EXPECT_NEAR(c.transmittance, T, 1e-6);
      sum += c.weight;
      T -= c.weight;
    }
    const auto [x, y] = list.pixels[k];
    EXPECT_NEAR(sum, r.alpha[r.pixel(x, y)], 1e-5);
  }
}

TEST(Rasterizer, PixelOutsideImageRejected) {
  const std::vector<Gaussian2D> gs{facing_disk(2.0, 1.0, Vec3(1, 1, 1))};
  const std::vector<std::pair<int, int>> px{{3, 0}};
  EXPECT_THROW(Rasterizer(gs, 0, axis_camera()).contributions(px), InputError);
}

TEST(Rasterizer, RepeatedRenderIsBitIdentical) {
  std::mt19937_64 rng(11);
  const auto gs = oracle::random_disks(rng, 30);
  const auto a = render(gs, 0, oracle::front_camera(), kDefaultCutoff, true);
  const auto b = render(gs, 0, oracle::front_camera(), kDefaultCutoff, true);
  EXPECT_EQ(a.color, b.color);
  EXPECT_EQ(a.feature, b.feature);
  EXPECT_EQ(a.depth, b.depth);
}
