#include <gtest/gtest.h>

#include <set>

#include "splitscene/orchestrator.hpp"
#include "splitscene/synth.hpp"

using namespace splitscene;

namespace {

struct Setup {
  SplatScene scene;
  std::vector<std::size_t> instance;
  ViewpointPlan plan;
  std::vector<ConditionInput> conds;
  std::vector<TargetInput> targets;
  std::map<int, LatentGrid> truth;
};

// A lone sphere, conditioned from views 0 and 8 of a 16-view ring at 32 px.
Setup sphere_setup() {
  Setup s;
  s.scene.gaussians = synth::make_sphere(Vec3::Zero(), 0.4, 600, Vec3(0.8, 0.4, 0.2));
  for (std::size_t i = 0; i < s.scene.gaussians.size(); ++i) s.instance.push_back(i);
  ViewpointConfig vc;
  vc.width = vc.height = 32;
  s.plan.poses = propose_viewpoints(s.scene.gaussians, vc);
  s.plan.conditions = {0, 8};
  for (int v = 0; v < 16; ++v)
    if (v % 8) s.plan.targets.push_back(v);
  std::vector<ConditionRender> renders;
  for (int v : s.plan.conditions) {
    ConditionRender r;
    r.image = render(s.scene, s.plan.poses[static_cast<std::size_t>(v)]).image(Vec3::Ones());
    renders.push_back(std::move(r));
  }
  std::tie(s.conds, s.targets) = completion_inputs(s.scene, s.instance, s.plan, renders);
  s.truth = instance_latents(s.scene, s.instance, s.plan.poses, s.plan.targets);
  return s;
}

CompletionConfig config(int steps, ConditionMode mode = ConditionMode::Average) {
  CompletionConfig c;
  c.schedule = NoiseSchedule::linear(steps);
  c.mode = mode;
  c.seed = 3;
  return c;
}

class Recording : public Denoiser {
 public:
  std::vector<double> predict(const DenoiseRequest& req) override {
    calls.emplace_back(req.t, req.condition_index);
    return inner.predict(req);
  }
  bool concurrent() const override { return false; }
  std::vector<std::pair<int, int>> calls;
  ConditionMockDenoiser inner;
};

class Failing : public Denoiser {
 public:
  std::vector<double> predict(const DenoiseRequest&) override { throw std::runtime_error("out of memory"); }
};

class WrongShape : public Denoiser {
 public:
  std::vector<double> predict(const DenoiseRequest&) override { return {0.0}; }
};

}  // namespace

TEST(Orchestrator, MockRecoversTargetsOnUnknownCells) {
  const auto s = sphere_setup();
  for (int T : {1, 10, 50}) {
    MockDenoiser mock(s.truth);
    const auto res = run_completion(s.conds, s.targets, s.plan.poses, mock, config(T));
    ASSERT_EQ(res.targets, s.plan.targets);
    double worst = 0.0;
    std::size_t unknown = 0;
    for (std::size_t n = 0; n < res.targets.size(); ++n) {
      const auto& x = res.latents[n];
      const auto& L = s.truth.at(res.targets[n]);
      for (std::size_t c = 0; c < x.cells(); ++c) {
        if (x.known[c]) continue;
        ++unknown;
        for (int ch = 0; ch < 3; ++ch) worst = std::max(worst, std::abs(x.data[c * 3 + ch] - L.data[c * 3 + ch]));
      }
    }
    EXPECT_GT(unknown, 0u);
    EXPECT_LE(worst, 1e-5) << "T = " << T;
  }
}

TEST(Orchestrator, KnownCellsCarryWarpedConditions) {
  const auto s = sphere_setup();
  ConditionMockDenoiser mock;
  std::size_t checked = 0;
  bool noisy = false;
  const auto observe = [&](int t, std::size_t, const LatentGrid& x, const LatentGrid& warped) {
    for (std::size_t c = 0; c < x.cells(); ++c) {
      ASSERT_EQ(x.known[c], warped.known[c]);
      if (!warped.known[c]) continue;
      ++checked;
      for (int ch = 0; ch < 3; ++ch) ASSERT_EQ(x.data[c * 3 + ch], warped.data[c * 3 + ch]) << "t = " << t;
    }
    noisy = noisy || t > 1;
  };
  const auto res = run_completion(s.conds, s.targets, s.plan.poses, mock, config(10), observe);
  EXPECT_GT(checked, 0u);
  EXPECT_TRUE(noisy);
  // After the loop the known cells hold the clean warps.
  for (std::size_t n = 0; n < s.targets.size(); ++n) {
    const auto clean = detail::apply_map(detail::warp_map(s.conds, s.targets[n].camera),
                                         {&s.conds[0].latent, &s.conds[1].latent}, 3);
    for (std::size_t c = 0; c < clean.cells(); ++c)
      if (clean.known[c])
        for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(res.latents[n].data[c * 3 + ch], clean.data[c * 3 + ch]);
  }
}

TEST(Orchestrator, AverageQueriesEveryCondition) {
  const auto s = sphere_setup();
  Recording rec;
  run_completion(s.conds, s.targets, s.plan.poses, rec, config(4));
  EXPECT_EQ(rec.calls.size(), 4u * s.targets.size() * 2u);
}

TEST(Orchestrator, RoundRobinCyclesConditions) {
  const auto s = sphere_setup();
  Recording rec;
  run_completion(s.conds, s.targets, s.plan.poses, rec, config(5, ConditionMode::RoundRobin));
  ASSERT_EQ(rec.calls.size(), 5u * s.targets.size());
  std::map<int, std::set<int>> per_step;
  for (const auto& [t, k] : rec.calls) per_step[t].insert(k);
  EXPECT_EQ(per_step[5], (std::set<int>{0}));
  EXPECT_EQ(per_step[4], (std::set<int>{8}));
  EXPECT_EQ(per_step[3], (std::set<int>{0}));
  EXPECT_EQ(per_step[1], (std::set<int>{0}));
}

TEST(Orchestrator, DeterministicForSeed) {
  const auto s = sphere_setup();
  ConditionMockDenoiser a, b;
  const auto ra = run_completion(s.conds, s.targets, s.plan.poses, a, config(10));
  const auto rb = run_completion(s.conds, s.targets, s.plan.poses, b, config(10));
  for (std::size_t n = 0; n < ra.latents.size(); ++n) EXPECT_EQ(ra.latents[n].data, rb.latents[n].data);
}

TEST(Orchestrator, DenoiserFailuresBecomeBackendErrors) {
  const auto s = sphere_setup();
  Failing f;
  EXPECT_THROW(run_completion(s.conds, s.targets, s.plan.poses, f, config(3)), BackendError);
  WrongShape w;
  EXPECT_THROW(run_completion(s.conds, s.targets, s.plan.poses, w, config(3)), BackendError);
  MockDenoiser missing({});
  EXPECT_THROW(run_completion(s.conds, s.targets, s.plan.poses, missing, config(3)), BackendError);
}

TEST(Orchestrator, EmptyInputs) {
  const auto s = sphere_setup();
  ConditionMockDenoiser mock;
  EXPECT_TRUE(run_completion(s.conds, {}, s.plan.poses, mock, config(3)).targets.empty());
  EXPECT_THROW(run_completion({}, s.targets, s.plan.poses, mock, config(3)), InputError);
}

TEST(Orchestrator, UnoccludedInstanceHasNoTargets) {
  SplatScene scene;
  scene.gaussians = synth::make_sphere(Vec3::Zero(), 0.4, 300, Vec3(0.5, 0.5, 0.5));
  InstanceRecord inst;
  inst.id = 1;
  for (std::size_t i = 0; i < scene.gaussians.size(); ++i) {
    inst.gaussians.push_back(i);
    scene.gaussians[i].feature = Feature::Zero();
    scene.gaussians[i].feature[0] = 1.f;
  }
  inst.mean_feature = FeatureD::Unit(0);
  auto cfg = config(3);
  cfg.views.width = cfg.views.height = 32;
  ConditionMockDenoiser mock;
  const auto job = complete_instance(scene, inst, mock, cfg);
  EXPECT_EQ(job.plan.conditions.size(), 16u);
  EXPECT_TRUE(job.plan.targets.empty());
  EXPECT_TRUE(job.result.targets.empty());
  cfg.views.width = 30;
  EXPECT_THROW(complete_instance(scene, inst, mock, cfg), InputError);
}
