#include <gtest/gtest.h>

#include "oracle.hpp"
#include "splitscene/config.hpp"

using namespace splitscene;

TEST(Config, Defaults) {
  const auto c = parse_config("", "/base");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.output, fs::path("/base/out"));
  EXPECT_TRUE(c.scene.empty());
  EXPECT_DOUBLE_EQ(c.clustering.membership_transmittance, 0.5);
  EXPECT_DOUBLE_EQ(c.clustering.visible_ratio, 0.3);
  EXPECT_DOUBLE_EQ(c.clustering.contain_ratio, 0.8);
  EXPECT_DOUBLE_EQ(c.clustering.merge_threshold, 0.9);
  EXPECT_EQ(c.clustering.dbscan_min_points, 8);
  EXPECT_DOUBLE_EQ(c.training.temperature.value, 0.3);
  EXPECT_DOUBLE_EQ(c.training.tau_seg, 0.9);
  EXPECT_EQ(c.training.mean_mode, MeanMode::BatchLocal);
  EXPECT_EQ(c.completion.run.schedule.steps(), 50);
  EXPECT_EQ(c.completion.run.views.count, 16);
  EXPECT_EQ(c.completion.run.views.width, 128);
  EXPECT_EQ(c.completion.run.mode, ConditionMode::Average);
  EXPECT_EQ(c.completion.denoiser, "mock");
  EXPECT_EQ(c.completion.run.seed, 42u);
}

TEST(Config, SectionsCommentsAndPaths) {
  const std::string text = R"(seed = 7
; comment
[paths]
scene = scene.spl
cameras = "cams/cameras.json"
masks = /abs/masks
output = run1

[training]
iters = 250
temperature = 0.5
mean_mode = global

[completion]
steps = 10
mode = round_robin
denoiser = python3 my_denoiser.py
view_size = 64
refine_positions = true
)";
  const auto c = parse_config(text, "/data/fx");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.scene, fs::path("/data/fx/scene.spl"));
  EXPECT_EQ(c.cameras, fs::path("/data/fx/cams/cameras.json"));
  EXPECT_EQ(c.masks, fs::path("/abs/masks"));
  EXPECT_EQ(c.output, fs::path("/data/fx/run1"));
  EXPECT_EQ(c.training.iters, 250);
  EXPECT_EQ(c.training.seed, 7u);
  EXPECT_DOUBLE_EQ(c.training.temperature.value, 0.5);
  EXPECT_EQ(c.training.mean_mode, MeanMode::Global);
  EXPECT_EQ(c.completion.run.schedule.steps(), 10);
  EXPECT_EQ(c.completion.run.mode, ConditionMode::RoundRobin);
  EXPECT_EQ(c.completion.denoiser, "python3 my_denoiser.py");
  EXPECT_EQ(c.completion.run.views.height, 64);
  EXPECT_TRUE(c.completion.refine.optimize_positions);
}

TEST(Config, OverridesWin) {
  const auto c = parse_config("[training]\niters = 250\n", "/b", {"training.iters=9", "seed=3", "completion.mode = round_robin"});
  EXPECT_EQ(c.training.iters, 9);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.completion.run.mode, ConditionMode::RoundRobin);
  EXPECT_EQ(c.tree.get<std::string>("training.iters"), "9");
  EXPECT_THROW(parse_config("", "/b", {"training.iters"}), InputError);
  EXPECT_THROW(parse_config("", "/b", {"=3"}), InputError);
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(parse_config("[training]\nitres = 3\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[render]\nx = 1\n", "/b"), InputError);
  EXPECT_THROW(parse_config("colour = red\n", "/b"), InputError);
  EXPECT_THROW(parse_config("", "/b", {"training.bogus=1"}), InputError);
}

TEST(Config, BadValuesRejected) {
  EXPECT_THROW(parse_config("[training]\niters = many\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[training]\niters = 3.5\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[training]\ntemperature = -1\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[training]\nmean_mode = median\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[completion]\nmode = vote\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[completion]\nview_size = 100\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[completion]\nsteps = 0\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[completion]\nrefine_positions = maybe\n", "/b"), InputError);
  EXPECT_THROW(parse_config("[training\niters = 3\n", "/b"), InputError);
}

TEST(Config, FileAndSnapshotRoundTrip) {
  const auto dir = oracle::scratch_dir("config");
  {
    std::ofstream out(dir / "c.ini");
    out << "seed = 11\n[paths]\nscene = s.spl\n[training]\niters = 5\n";
  }
  const auto c = load_config(dir / "c.ini", {"completion.steps=20"});
  EXPECT_EQ(c.scene, dir / "s.spl");
  fs::create_directories(dir / "elsewhere");
  write_config_snapshot(c, dir / "elsewhere" / "snap.ini");
  const auto again = load_config(dir / "elsewhere" / "snap.ini");
  EXPECT_EQ(again.seed, 11u);
  EXPECT_EQ(again.training.iters, 5);
  EXPECT_EQ(again.completion.run.schedule.steps(), 20);
  EXPECT_EQ(again.scene, dir / "s.spl");
  EXPECT_EQ(again.output, dir / "out");
  EXPECT_THROW(load_config(dir / "missing.ini"), InputError);
}
