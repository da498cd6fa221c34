// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "fixtures.hpp"
#include "steplab/toymotion.hpp"

using namespace steplab;
using namespace steplab::toymotion;

namespace {

DatasetConfig small(std::uint64_t seed = 1) {
  DatasetConfig c;
  c.num_classes = 4;
  c.per_class = 20;
  c.frames = 8;
  c.dims = 4;
  c.seed = seed;
  return c;
}

/// Distance from a raw motion to the class prototype at the phase read off
/// its first frame.
double prototype_distance(const ClassParams& cls, const Tensor& raw, std::size_t frames, std::size_t dims) {
  const double phase = std::atan2(raw[1], raw[0]);
  const auto proto = class_motion(cls, frames, dims, phase);
  double d = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) d += (raw[i] - proto[i]) * (raw[i] - proto[i]);
  return std::sqrt(d);
}

/// Best prototype distance over a phase grid; does not need a clean first frame.
double grid_distance(const ClassParams& cls, const Tensor& raw, std::size_t frames, std::size_t dims) {
  double best = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 360; ++k) {
    const auto proto = class_motion(cls, frames, dims, 2.0 * M_PI * k / 360.0);
    double d = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) d += (raw[i] - proto[i]) * (raw[i] - proto[i]);
    best = std::min(best, d);
  }
  return std::sqrt(best);
}

}  // namespace

TEST(Dataset, SeedDeterminism) {
  const auto a = generate_dataset(small(3));
  const auto b = generate_dataset(small(3));
  const auto c = generate_dataset(small(4));
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].frames, b.train[i].frames);
  EXPECT_NE(a.train[0].frames, c.train[0].frames);
}

TEST(Dataset, SplitsDisjointAndCovering) {
  const auto ds = generate_dataset(small());
  std::set<std::uint64_t> ids;
  std::size_t total = 0;
  for (auto s : {Split::Train, Split::Val, Split::Test}) {
    std::set<int> classes;
    for (const auto& m : ds.split(s)) {
      ids.insert(m.sample_id);
      classes.insert(m.condition);
      EXPECT_EQ(m.frames.size(), ds.motion_dim());
      EXPECT_TRUE(m.frames.all_finite());
      ++total;
    }
    EXPECT_EQ(classes.size(), 4u) << split_name(s);
  }
  EXPECT_EQ(ids.size(), total);
  EXPECT_EQ(total, 80u);
  EXPECT_EQ(ds.train.size(), 64u);
}

TEST(Dataset, TrainSplitIsStandardized) {
  const auto ds = generate_dataset(small());
  const std::size_t d = ds.config.dims;
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0, s2 = 0.0, n = 0.0;
    for (const auto& m : ds.train) {
      for (std::size_t i = j; i < m.frames.size(); i += d) {
        s += m.frames[i];
        s2 += m.frames[i] * m.frames[i];
        n += 1.0;
      }
    }
    EXPECT_NEAR(s / n, 0.0, 1e-12);
    EXPECT_NEAR(s2 / n, 1.0, 1e-9);
  }
}

TEST(Dataset, StandardizerRoundTrip) {
  const auto ds = generate_dataset(small());
  Rng rng(2);
  const auto x = standard_normal({ds.motion_dim()}, rng);
  const auto back = ds.standardizer.invert(ds.standardizer.apply(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-12);
}

TEST(Dataset, NoiselessSamplesDifferOnlyByPhase) {
  auto cfg = small();
  cfg.noise_scale = 0.0;
  const auto ds = generate_dataset(cfg);
  for (const auto& m : ds.train) {
    const auto raw = ds.standardizer.invert(m.frames);
    EXPECT_LT(prototype_distance(ds.classes[static_cast<std::size_t>(m.condition)], raw, cfg.frames, cfg.dims), 1e-9);
  }
}

TEST(Dataset, PrototypeClassifierIsPerfectOnNoiselessData) {
  for (bool hard : {false, true}) {
    auto cfg = small();
    cfg.noise_scale = 0.0;
    cfg.hard_negative = hard;
    const auto ds = generate_dataset(cfg);
    std::size_t correct = 0, n = 0;
    for (auto s : {Split::Train, Split::Val, Split::Test}) {
      for (const auto& m : ds.split(s)) {
        const auto raw = ds.standardizer.invert(m.frames);
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < ds.classes.size(); ++c) {
          const double d = prototype_distance(ds.classes[c], raw, cfg.frames, cfg.dims);
          if (d < bd) {
            bd = d;
            best = c;
          }
        }
        correct += best == static_cast<std::size_t>(m.condition);
        ++n;
      }
    }
    EXPECT_EQ(correct, n) << "hard_negative=" << hard;
  }
}

TEST(Dataset, HardNegativeTwinsTheLastClass) {
  auto cfg = small();
  cfg.hard_negative = true;
  cfg.hard_negative_gap = 0.03;
  const auto g = class_grid(cfg);
  EXPECT_EQ(g[3].radius, g[2].radius);
  EXPECT_NEAR(g[3].omega, g[2].omega + 0.03, 1e-15);
}

TEST(Dataset, RejectsBadConfigs) {
  auto c = small();
  c.num_classes = 1;
  EXPECT_THROW(generate_dataset(c), std::invalid_argument);
  c = small();
  c.per_class = 3;
  EXPECT_THROW(generate_dataset(c), std::invalid_argument);
  c = small();
  c.hard_negative = true;
  c.hard_negative_gap = 0.0;
  EXPECT_THROW(generate_dataset(c), std::invalid_argument);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "steplab_test_dataset";
  std::filesystem::remove_all(dir);
  const auto ds = generate_dataset(small(9));
  save_dataset(dir, ds);
  EXPECT_TRUE(std::filesystem::exists(dir / "dataset.tsv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  const auto back = load_dataset(dir);
  for (auto s : {Split::Train, Split::Val, Split::Test}) {
    ASSERT_EQ(back.split(s).size(), ds.split(s).size());
    for (std::size_t i = 0; i < ds.split(s).size(); ++i) {
      EXPECT_EQ(back.split(s)[i].frames, ds.split(s)[i].frames);
      EXPECT_EQ(back.split(s)[i].condition, ds.split(s)[i].condition);
      EXPECT_EQ(back.split(s)[i].sample_id, ds.split(s)[i].sample_id);
    }
  }
  EXPECT_EQ(back.standardizer.mean, ds.standardizer.mean);
  EXPECT_EQ(back.standardizer.stddev, ds.standardizer.stddev);
  EXPECT_EQ(back.config.num_classes, ds.config.num_classes);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), std::runtime_error);
}

TEST(Pretrain, DiffusionLossDrops) {
  auto cfg = small();
  cfg.dims = 2;
  const auto ds = generate_dataset(cfg);
  models::DenoiserConfig dc;
  dc.motion_dim = ds.motion_dim();
  dc.num_conditions = cfg.num_classes;
  dc.hidden = 32;
  auto theta = models::init_denoiser(dc, 1);
  const auto schedule = diffusion::make_schedule(50, 1e-4, 0.02);
  const double before = diffusion_eval_loss(theta, ds, schedule, 256, 7);
  const auto trace = pretrain_diffusion(theta, ds, schedule, {1000, 16, 1e-3, 2});
  EXPECT_EQ(trace.size(), 1000u);
  for (double v : trace) EXPECT_GE(v, 0.0);
  EXPECT_LT(diffusion_eval_loss(theta, ds, schedule, 256, 7), before);

  // samples land closer to their class prototype than the starting noise
  double noise_score = 0.0, sample_score = 0.0;
  for (int i = 0; i < 16; ++i) {
    const int c = i % static_cast<int>(cfg.num_classes);
    ad::Tape tape;
    const auto traj = diffusion::sample_trajectory(tape, models::eps_fn(theta, c, false), c, {ds.motion_dim()},
                                                   schedule, diffusion::Retention::Stepwise, 100 + i, {false, true});
    const auto& cls = ds.classes[static_cast<std::size_t>(c)];
    noise_score -= grid_distance(cls, ds.standardizer.invert(traj.states.front()), cfg.frames, cfg.dims);
    sample_score -= grid_distance(cls, ds.standardizer.invert(traj.x0()), cfg.frames, cfg.dims);
  }
  EXPECT_GT(sample_score, noise_score);
}

TEST(Pretrain, RetrievalBeatsChance) {
  auto cfg = small();
  cfg.num_classes = 8;
  cfg.per_class = 40;
  cfg.dims = 2;
  const auto ds = generate_dataset(cfg);
  models::RewardConfig rc;
  rc.motion_dim = ds.motion_dim();
  rc.num_conditions = cfg.num_classes;
  rc.hidden = 32;
  auto phi = models::init_reward(rc, 3);
  const auto schedule = diffusion::make_schedule(50, 1e-4, 0.02);
  RetrievalPretrainConfig pc;
  pc.steps = 400;
  pc.eval = {32, 50, 3, 1};
  pc.seed = 4;
  const auto trace = pretrain_retrieval(phi, ds, schedule, pc);
  ASSERT_FALSE(trace.empty());
  EXPECT_GT(trace.back().val.text_to_motion[0], 5.0 / 32.0);
}

TEST(Pretrain, TemperatureGradient) {
  auto phi = steplab::testing::tiny_reward(3, 4);
  Rng rng(1);
  const std::vector<Tensor> m{standard_normal({3}, rng), standard_normal({3}, rng)};
  const std::vector<ConditionId> c{0, 2};
  const std::vector<int> ts{0, 0};
  auto f = [&](ad::Tape& tape) { return spl::contrastive_loss(tape, phi, m, c, ts, true); };
  std::vector<ad::Param*> tau{&phi.params.get("log_tau")};
  EXPECT_LT(ad::finite_diff_check(f, tau).max_rel_error, 1e-6);
}
