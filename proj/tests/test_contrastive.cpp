#include <gtest/gtest.h>

#include <random>

#include "splitscene/contrastive.hpp"

using namespace splitscene;

namespace {

FeatureD unit(int k) {
  FeatureD f = FeatureD::Zero();
  f[k] = 1.0;
  return f;
}

LabeledBatch random_batch(std::mt19937_64& rng, int labels, int per_label) {
  std::normal_distribution<double> n(0.0, 1.0);
  LabeledBatch b;
  for (int l = 1; l <= labels; ++l)
    for (int i = 0; i < per_label; ++i) {
      FeatureD f;
      for (int k = 0; k < kFeatureDim; ++k) f[k] = n(rng);
      b.add(f, l);
    }
  return b;
}

double max_rel_error(const LabeledBatch& batch, const Temperature& temp, const std::map<int, FeatureD>* fixed) {
  const auto res = contrastive(batch, temp, true, fixed);
  const double h = 1e-4;
  double worst = 0.0;
  for (std::size_t a = 0; a < batch.size(); ++a)
    for (int k = 0; k < kFeatureDim; ++k) {
      LabeledBatch p = batch, m = batch;
      p.features[a][k] += h;
      m.features[a][k] -= h;
      const double fd = (contrastive(p, temp, false, fixed).loss - contrastive(m, temp, false, fixed).loss) / (2 * h);
      const double an = res.grad[a][k];
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-3, std::abs(fd) + std::abs(an)));
    }
  return worst;
}

}  // namespace

TEST(Contrastive, OrthogonalPair) {
  LabeledBatch b;
  b.add(unit(0), 1);
  b.add(unit(1), 2);
  EXPECT_NEAR(contrastive_loss(b, {0.3, {}}), 0.03505241607946319, 1e-12);
}

TEST(Contrastive, IdenticalFeaturesGiveLogOfLabelCount) {
  LabeledBatch b;
  b.add(unit(0), 1);
  b.add(2.0 * unit(0), 2);
  EXPECT_NEAR(contrastive_loss(b, {0.3, {}}), 0.693147180559945, 1e-12);
}

TEST(Contrastive, MixedBatchMatchesReference) {
  LabeledBatch b;
  b.add(unit(0) + 0.5 * unit(1), 1);
  b.add(2.0 * unit(0), 1);
  b.add(unit(1) - unit(2), 2);
  b.add(unit(1), 2);
  b.add(3.0 * unit(2), 3);
  EXPECT_NEAR(contrastive_loss(b, {0.3, {}}), 0.18993121150450168, 1e-12);
  EXPECT_NEAR(contrastive_loss(b, {1.0, {}}), 0.9797561587621657, 1e-12);
}

TEST(Contrastive, ScaleInvariant) {
  std::mt19937_64 rng(1);
  auto b = random_batch(rng, 3, 4);
  const double l0 = contrastive_loss(b, {});
  for (auto& f : b.features) f *= 7.5;
  EXPECT_NEAR(contrastive_loss(b, {}), l0, 1e-12);
}

TEST(Contrastive, PerInstanceTemperature) {
  Temperature t{0.3, {{2, 1.0}}};
  EXPECT_DOUBLE_EQ(t(1), 0.3);
  EXPECT_DOUBLE_EQ(t(2), 1.0);
  LabeledBatch b;
  b.add(unit(0), 1);
  b.add(unit(1), 2);
  // Sample 1 sees logits (1/0.3, 0), sample 2 sees (0, 1/1).
  const double expect = 0.5 * (std::log1p(std::exp(-1.0 / 0.3)) + std::log1p(std::exp(-1.0)));
  EXPECT_NEAR(contrastive_loss(b, t), expect, 1e-12);
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const auto b = random_batch(rng, 2 + trial % 4, 1 + trial % 5);
    EXPECT_LE(max_rel_error(b, {0.3, {}}, nullptr), 1e-4) << "trial " << trial;
  }
}

TEST(Contrastive, GradientWithFixedMeans) {
  std::mt19937_64 rng(9);
  const auto b = random_batch(rng, 3, 3);
  std::map<int, FeatureD> means;
  for (int l = 1; l <= 3; ++l) means[l] = random_batch(rng, 1, 1).features[0].normalized();
  EXPECT_LE(max_rel_error(b, {0.5, {}}, &means), 1e-4);
}

TEST(Contrastive, GradientOrthogonalToFeature) {
  std::mt19937_64 rng(4);
  const auto b = random_batch(rng, 3, 2);
  const auto g = contrastive_grad(b, {});
  for (std::size_t a = 0; a < b.size(); ++a) EXPECT_NEAR(g[a].dot(b.features[a]), 0.0, 1e-12);
}

TEST(Contrastive, RejectsDegenerateBatches) {
  LabeledBatch one;
  one.add(unit(0), 1);
  one.add(unit(1), 1);
  EXPECT_THROW(contrastive_loss(one, {}), TrainingError);
  LabeledBatch b;
  b.add(unit(0), 1);
  b.add(unit(1), 2);
  EXPECT_THROW(contrastive_loss(b, {0.0, {}}), InputError);
  b.features[0][3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(contrastive_loss(b, {}), TrainingError);
}
