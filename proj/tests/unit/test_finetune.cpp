// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "steplab/finetune.hpp"
#include "steplab/instrument.hpp"

using namespace steplab;
using namespace steplab::finetune;
using steplab::ad::Tape;
using steplab::ad::Value;
using steplab::testing::rel_error;

namespace {

StrategyConfig make(StrategyKind kind, int k = 1) {
  StrategyConfig c;
  c.kind = kind;
  c.draft_k = k;
  if (kind == StrategyKind::Refl) c.reward_mode = models::RewardMode::OneStep;
  return c;
}

std::vector<double> grads_of(models::DenoiserParams& theta, const std::function<Value(Tape&)>& f) {
  theta.params.zero_grad();
  Tape tape;
  tape.backward(f(tape));
  auto g = theta.params.flat_grads();
  theta.params.zero_grad();
  return g;
}

std::vector<Tensor> plain_states(models::DenoiserParams& theta, int c, std::uint64_t seed,
                                 const diffusion::NoiseSchedule& s, bool stochastic = false) {
  Tape tape;
  return diffusion::sample_trajectory(tape, models::eps_fn(theta, c, false), c, {theta.config.motion_dim}, s,
                                      diffusion::Retention::Stepwise, seed, {stochastic, true})
      .states;
}

constexpr StrategyKind kAll[] = {StrategyKind::EasyTune, StrategyKind::EasyTuneChain, StrategyKind::FullBackprop,
                                 StrategyKind::DraftK,   StrategyKind::DrTune,        StrategyKind::Refl};

}  // namespace

TEST(StepWeight, Formulas) {
  const StepWeighting dec{WeightingKind::LinearDecreasing, 0};
  const StepWeighting inc{WeightingKind::LinearIncreasing, 0};
  EXPECT_DOUBLE_EQ(step_weight(50, 50, dec), 1.5);
  EXPECT_NEAR(step_weight(1, 1000000, dec), 0.5, 1e-5);
  EXPECT_DOUBLE_EQ(step_weight(50, 50, inc), 0.5);
  EXPECT_NEAR(step_weight(1, 1000000, inc), 1.5, 1e-5);
  for (int t = 1; t <= 10; ++t) EXPECT_EQ(step_weight(t, 10, {}), 1.0);
  const StepWeighting last{WeightingKind::LastK, 3}, first{WeightingKind::FirstK, 3};
  EXPECT_EQ(step_weight(3, 10, last), 1.0);
  EXPECT_EQ(step_weight(4, 10, last), 0.0);
  EXPECT_EQ(step_weight(8, 10, first), 1.0);
  EXPECT_EQ(step_weight(7, 10, first), 0.0);
}

TEST(StepWeight, ParseRoundTrip) {
  for (const char* s : {"uniform", "last_k:20", "first_k:5", "linear_increasing", "linear_decreasing"}) {
    EXPECT_EQ(weighting_name(parse_weighting(s)), s);
  }
  EXPECT_THROW(parse_weighting("last_k:"), std::invalid_argument);
  EXPECT_THROW(parse_weighting("last_k:0"), std::invalid_argument);
  EXPECT_THROW(parse_weighting("last_k:3x"), std::invalid_argument);
  EXPECT_THROW(parse_weighting("cosine"), std::invalid_argument);
}

TEST(Strategy, ParseNames) {
  for (auto k : kAll) EXPECT_EQ(parse_strategy(strategy_name(k)), k);
  EXPECT_EQ(parse_strategy("full"), StrategyKind::FullBackprop);
  EXPECT_EQ(parse_strategy("draft-k"), StrategyKind::DraftK);
  EXPECT_EQ(parse_strategy("easytune-chain"), StrategyKind::EasyTuneChain);
  EXPECT_THROW(parse_strategy("ddpo"), std::invalid_argument);
}

TEST(Strategy, ValidateRejects) {
  auto k0 = make(StrategyKind::DraftK, 0);
  EXPECT_THROW(validate(k0, 10), std::invalid_argument);
  auto k11 = make(StrategyKind::DraftK, 11);
  EXPECT_THROW(validate(k11, 10), std::invalid_argument);
  k11.randomized_k = true;
  EXPECT_NO_THROW(validate(k11, 10));
  auto kl = make(StrategyKind::EasyTune);
  kl.kl_weight = -1.0;
  EXPECT_THROW(validate(kl, 10), std::invalid_argument);
  auto os = make(StrategyKind::EasyTune);
  os.reward_mode = models::RewardMode::OneStep;
  os.stochastic_sampler = true;
  EXPECT_THROW(validate(os, 10), std::invalid_argument);
  auto frac = make(StrategyKind::EasyTune);
  frac.step_fraction = 0.0;
  EXPECT_THROW(validate(frac, 10), std::invalid_argument);
  EXPECT_THROW(validate(make(StrategyKind::EasyTune), 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Gradient oracles

class Instance : public ::testing::TestWithParam<int> {
 protected:
  void SetUp() override {
    seed = static_cast<std::uint64_t>(GetParam());
    theta = steplab::testing::tiny_denoiser(3, seed + 1);
    phi = steplab::testing::tiny_reward(3, seed + 2);
    cond = static_cast<int>(seed % 3);
  }
  std::uint64_t seed = 0;
  int cond = 0;
  models::DenoiserParams theta;
  models::RewardParams phi;
  diffusion::NoiseSchedule schedule = steplab::testing::random_schedule(4, 99);
};

TEST_P(Instance, EasyTuneStepEqualsSingleStepProduct) {
  schedule = steplab::testing::random_schedule(4, seed);
  auto cfg = make(StrategyKind::EasyTune);
  cfg.weighting = {WeightingKind::LinearDecreasing, 0};
  Rng rng(seed);
  const auto x_t = standard_normal({3}, rng);
  for (int t = 1; t <= 4; ++t) {
    const auto got = grads_of(theta, [&](Tape& tape) {
      return easytune_step_loss(tape, theta, phi, tape.constant(x_t), t, cond, schedule, cfg).loss;
    });
    // oracle: -w_t * dR/dx_{t-1} . d pi(sg x_t)/d theta
    Tape tape;
    const auto eps = models::eps_fn(theta, cond);
    const auto x_prev = diffusion::reverse_step_sg(tape, tape.constant(x_t), t, eps, schedule);
    std::vector<Value> leaves;
    for (auto& p : theta.params) leaves.push_back(tape.parameter(p));
    const Tensor jt = tape.jacobian(x_prev, leaves);
    const Tensor x_prev_value = x_prev.data();
    tape.release_graph();
    const auto xv = tape.variable(x_prev_value);
    tape.backward(models::reward(tape, phi, xv, t - 1, cond));
    const Tensor g = xv.grad();
    const double w = step_weight(t, 4, cfg.weighting);
    const std::size_t p = jt.shape()[1];
    std::vector<double> want(p, 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < p; ++j) want[j] -= w * g[i] * jt[i * p + j];
    }
    EXPECT_LT(rel_error(got, want), 1e-10) << "t=" << t;
  }
}

TEST_P(Instance, EasyTuneStepIgnoresEarlierStates) {
  schedule = steplab::testing::random_schedule(4, seed);
  const auto cfg = make(StrategyKind::EasyTune);
  Rng rng(seed + 7);
  const auto x_up = standard_normal({3}, rng);
  Tape tape;
  const auto eps = models::eps_fn(theta, cond);
  const auto upstream = tape.variable(x_up);
  const auto x_t = diffusion::reverse_step(tape, upstream, 4, eps, schedule);
  theta.params.zero_grad();
  tape.backward(easytune_step_loss(tape, theta, phi, x_t, 3, cond, schedule, cfg).loss);
  EXPECT_EQ(upstream.grad(), Tensor::zeros_like(x_up));
  const auto attached = theta.params.flat_grads();
  const auto constant = grads_of(theta, [&](Tape& t2) {
    return easytune_step_loss(t2, theta, phi, t2.constant(x_t.data()), 3, cond, schedule, cfg).loss;
  });
  EXPECT_EQ(attached, constant);
}

TEST_P(Instance, FullBackpropMatchesUnrolledSum) {
  schedule = steplab::testing::random_schedule(4, seed);
  const auto cfg = make(StrategyKind::FullBackprop);
  const auto got = grads_of(theta, [&](Tape& tape) {
    return trajectory_loss(tape, theta, phi, cond, seed, schedule, cfg).loss;
  });
  const auto oracle = instrument::unrolled_gradient_oracle(theta, phi, cond, schedule, seed);
  EXPECT_LT(rel_error(got, oracle.total), 1e-8);
}

TEST_P(Instance, DraftKFullWindowEqualsFullBackprop) {
  schedule = steplab::testing::random_schedule(4, seed);
  auto full = [&](const StrategyConfig& c) {
    return grads_of(theta, [&](Tape& tape) { return trajectory_loss(tape, theta, phi, cond, seed, schedule, c).loss; });
  };
  EXPECT_EQ(full(make(StrategyKind::DraftK, 4)), full(make(StrategyKind::FullBackprop)));
}

TEST_P(Instance, DraftKOneStepUsesOnlyFinalStep) {
  schedule = steplab::testing::random_schedule(4, seed);
  const auto got = grads_of(theta, [&](Tape& tape) {
    return trajectory_loss(tape, theta, phi, cond, seed, schedule, make(StrategyKind::DraftK, 1)).loss;
  });
  auto oracle = instrument::unrolled_gradient_oracle(theta, phi, cond, schedule, seed);
  // zero the Jacobians of every step but the last and reassemble
  for (std::size_t i = 1; i < oracle.jac_theta.size(); ++i) {
    oracle.jac_theta[i].fill(0.0);
    oracle.jac_x[i].fill(0.0);
  }
  const auto terms = instrument::assemble_unrolled(oracle.reward_grad, oracle.jac_x, oracle.jac_theta);
  EXPECT_LT(rel_error(got, terms[0]), 1e-10);
}

TEST_P(Instance, DrTuneMatchesRecursion) {
  schedule = steplab::testing::random_schedule(4, seed);
  const auto cfg = make(StrategyKind::DrTune);
  const auto got = grads_of(theta, [&](Tape& tape) {
    return trajectory_loss(tape, theta, phi, cond, seed, schedule, cfg).loss;
  });
  // sum_t g0 (prod_{s<=t} 1/sqrt(alpha_s)) (-beta_t / sqrt(1 - alpha_bar_t)) d eps(sg x_t)/d theta, L = -R
  const auto states = plain_states(theta, cond, seed, schedule);
  Tape tape;
  const auto x0 = tape.variable(states.back());
  tape.backward(models::reward(tape, phi, x0, 0, cond));
  const Tensor g0 = x0.grad();
  tape.release_graph();
  std::vector<double> want(theta.params.numel(), 0.0);
  double prod = 1.0;
  for (int t = 1; t <= 4; ++t) {
    prod /= std::sqrt(schedule.alpha(t));
    const double coef = -schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t)) * prod;
    const auto e = models::denoiser_forward(tape, theta, tape.constant(states[static_cast<std::size_t>(4 - t)]), t, cond);
    std::vector<Value> leaves;
    for (auto& p : theta.params) leaves.push_back(tape.parameter(p));
    const Tensor je = tape.jacobian(e, leaves);
    tape.release_graph();
    const std::size_t p = want.size();
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < p; ++j) want[j] -= g0[i] * coef * je[i * p + j];
    }
  }
  theta.params.zero_grad();
  EXPECT_LT(rel_error(got, want), 1e-10);
}

TEST_P(Instance, StrategyLossesMatchFiniteDifferences) {
  schedule = steplab::testing::random_schedule(3, seed);
  FrozenReference ref(steplab::testing::tiny_denoiser(3, seed + 50));
  auto params = steplab::testing::param_ptrs(theta.params);
  for (auto kind : kAll) {
    auto cfg = make(kind, 2);
    cfg.kl_weight = seed % 2 == 0 ? 0.0 : 0.5;
    cfg.stochastic_sampler = kind != StrategyKind::EasyTune && kind != StrategyKind::EasyTuneChain && seed % 3 == 0;
    if (kind == StrategyKind::EasyTune || kind == StrategyKind::EasyTuneChain) {
      cfg.reward_mode = seed % 2 == 0 ? models::RewardMode::NoiseAware : models::RewardMode::OneStep;
      Rng rng(seed);
      const auto x = standard_normal({3}, rng);
      auto f = [&](Tape& tape) {
        return easytune_step_loss(tape, theta, phi, tape.constant(x), 2, cond, schedule, cfg, &ref).loss;
      };
      EXPECT_LT(ad::finite_diff_check(f, params).max_rel_error, 1e-4) << strategy_name(kind);
    } else {
      auto f = [&](Tape& tape) { return trajectory_loss(tape, theta, phi, cond, seed, schedule, cfg, &ref).loss; };
      EXPECT_LT(ad::finite_diff_check(f, params).max_rel_error, 1e-4) << strategy_name(kind);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, Instance, ::testing::Range(0, 10));

// ---------------------------------------------------------------------------
// Update-level behavior

class Updates : public ::testing::Test {
 protected:
  models::DenoiserParams theta = steplab::testing::tiny_denoiser(4, 3);
  models::RewardParams phi = steplab::testing::tiny_reward(4, 4);
  diffusion::NoiseSchedule schedule = diffusion::make_schedule(8, 1e-3, 0.2);

  UpdateRecord run(models::DenoiserParams& th, const StrategyConfig& cfg, double lr, const Batch& batch,
                   bool states = true) {
    models::Adam opt(th.params, {{lr, models::LrDecay::Constant}});
    FrozenReference ref(th);
    UpdateContext ctx{th, phi, schedule, cfg, opt, &ref, states};
    return run_update(ctx, batch);
  }
};

TEST_F(Updates, ValuePathIdenticalAcrossStrategiesBeforeUpdate) {
  const Batch batch{{0, 2}, {11, 12}};
  for (bool stochastic : {false, true}) {
    for (auto kind : kAll) {
      auto th = theta;
      auto cfg = make(kind, 3);
      cfg.stochastic_sampler = stochastic;
      if (stochastic && kind == StrategyKind::Refl) cfg.reward_mode = models::RewardMode::OneStep;
      const auto rec = run(th, cfg, 0.0, batch);
      ASSERT_EQ(rec.states.size(), 2u);
      EXPECT_EQ(rec.states[0], plain_states(theta, 0, 11, schedule, stochastic)) << strategy_name(kind);
      EXPECT_EQ(rec.states[1], plain_states(theta, 2, 12, schedule, stochastic)) << strategy_name(kind);
    }
  }
}

TEST_F(Updates, EasyTuneStatesDivergeOnlyAfterFirstUpdate) {
  auto th = theta;
  const auto rec = run(th, make(StrategyKind::EasyTune), 1e-2, {{1}, {5}});
  const auto ref = plain_states(theta, 1, 5, schedule);
  EXPECT_EQ(rec.states[0][0], ref[0]);
  EXPECT_EQ(rec.states[0][1], ref[1]);
  EXPECT_NE(rec.states[0].back(), ref.back());
}

TEST_F(Updates, ChainRollsWithFrozenParameters) {
  auto th = theta;
  const auto rec = run(th, make(StrategyKind::EasyTuneChain), 1e-2, {{1}, {5}});
  EXPECT_EQ(rec.states[0], plain_states(theta, 1, 5, schedule));
  EXPECT_EQ(rec.updates, 8u);
  EXPECT_NE(th.params.flat_values(), theta.params.flat_values());
}

TEST_F(Updates, ZeroLearningRateLeavesParameters) {
  for (auto kind : kAll) {
    auto th = theta;
    run(th, make(kind, 2), 0.0, {{0}, {1}});
    EXPECT_EQ(th.params.flat_values(), theta.params.flat_values()) << strategy_name(kind);
  }
}

TEST_F(Updates, UpdateCounts) {
  schedule = diffusion::make_schedule(1, 0.1, 0.1);
  auto a = theta, b = theta;
  const auto ra = run(a, make(StrategyKind::EasyTune), 1e-2, {{0}, {3}});
  const auto rb = run(b, make(StrategyKind::EasyTuneChain), 1e-2, {{0}, {3}});
  EXPECT_EQ(ra.updates, 1u);
  EXPECT_EQ(a.params.flat_values(), b.params.flat_values());
  schedule = diffusion::make_schedule(8, 1e-3, 0.2);
  auto c = theta;
  auto half = make(StrategyKind::EasyTune);
  half.step_fraction = 0.5;
  const auto rc = run(c, half, 1e-2, {{0}, {3}});
  EXPECT_EQ(rc.updates, 4u);
  auto d = theta;
  EXPECT_EQ(run(d, make(StrategyKind::FullBackprop), 1e-2, {{0, 1}, {3, 4}}).updates, 1u);
}

TEST_F(Updates, SingleStepFullEqualsEasyTune) {
  schedule = diffusion::make_schedule(1, 0.1, 0.1);
  const auto easy = grads_of(theta, [&](Tape& tape) {
    return easytune_step_loss(tape, theta, phi, tape.constant(diffusion::initial_noise({4}, 9)), 1, 2, schedule,
                              make(StrategyKind::EasyTune))
        .loss;
  });
  const auto full = grads_of(theta, [&](Tape& tape) {
    return trajectory_loss(tape, theta, phi, 2, 9, schedule, make(StrategyKind::FullBackprop)).loss;
  });
  EXPECT_LT(rel_error(easy, full), 1e-14);
}

TEST_F(Updates, NonFiniteLossSkipped) {
  auto th = theta;
  th.params.at(1).value[0] = std::nan("");
  const auto rec = run(th, make(StrategyKind::EasyTune), 1e-2, {{0}, {1}}, false);
  EXPECT_EQ(rec.updates, 0u);
  EXPECT_EQ(rec.skipped, 8u);
}

TEST_F(Updates, ReflAtFinalStepUsesOneStepPrediction) {
  const auto cfg = make(StrategyKind::Refl);
  std::uint64_t seed = 0;
  while (draw_window(cfg, schedule.steps(), seed) != 1) ++seed;
  Tape tape;
  const double loss = trajectory_loss(tape, theta, phi, 1, seed, schedule, cfg).loss.item();
  tape.release_graph();
  const auto states = plain_states(theta, 1, seed, schedule);
  const auto x0_hat =
      diffusion::one_step_predict(tape, tape.constant(states[states.size() - 2]), 1, models::eps_fn(theta, 1), schedule);
  EXPECT_EQ(loss, -models::clean_reward(phi, x0_hat.data(), 1));
}

TEST_F(Updates, ReflUsesOneDenoiserCall) {
  const auto cfg = make(StrategyKind::Refl);
  Tape tape;
  trajectory_loss(tape, theta, phi, 0, 4, schedule, cfg);
  const auto got = tape.count_ops(ad::Op::MatVec);
  tape.release_graph();
  models::denoiser_forward(tape, theta, tape.constant(Tensor({4})), 3, 0);
  models::reward(tape, phi, tape.constant(Tensor({4})), 0, 0);
  EXPECT_EQ(got, tape.count_ops(ad::Op::MatVec));
}

TEST_F(Updates, KlPenalty) {
  FrozenReference same(theta);
  auto cfg = make(StrategyKind::EasyTune);
  const auto x = Tensor::vector({0.2, -0.3, 0.4, 0.1});
  Tape tape;
  const double base = easytune_step_loss(tape, theta, phi, tape.constant(x), 5, 1, schedule, cfg).loss.item();
  cfg.kl_weight = 3.0;
  EXPECT_EQ(easytune_step_loss(tape, theta, phi, tape.constant(x), 5, 1, schedule, cfg, &same).loss.item(), base);
  EXPECT_THROW(easytune_step_loss(tape, theta, phi, tape.constant(x), 5, 1, schedule, cfg), std::invalid_argument);

  const auto l = tape.constant(Tensor::scalar(1.0));
  const auto a = tape.constant(Tensor::vector({1.0, 2.0}));
  const auto b = tape.constant(Tensor::vector({0.0, 0.0}));
  EXPECT_EQ(kl_augment(tape, l, a, b, 0.0).item(), 1.0);
  const double p1 = kl_augment(tape, l, a, b, 1.0).item() - 1.0;
  const double p2 = kl_augment(tape, l, a, b, 2.0).item() - 1.0;
  EXPECT_DOUBLE_EQ(p1, 2.5);
  EXPECT_DOUBLE_EQ(p2, 2.0 * p1);
}

TEST_F(Updates, RecordedRewardIsFinalCleanReward) {
  auto th = theta;
  const auto rec = run(th, make(StrategyKind::FullBackprop), 1e-2, {{2}, {8}});
  EXPECT_EQ(rec.final_reward, models::clean_reward(phi, plain_states(theta, 2, 8, schedule).back(), 2));
}

TEST_F(Updates, CsvLog) {
  auto th = theta;
  std::ostringstream os;
  UpdateLog log(os);
  auto rec = run(th, make(StrategyKind::EasyTune), 1e-3, {{0}, {1}}, false);
  log.append(rec);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, UpdateLog::kHeader);
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8);
  }
  EXPECT_EQ(rows, 8);
}

TEST(Memory, PeaksFollowTheirLaws) {
  auto theta = steplab::testing::tiny_denoiser(4, 1);
  auto phi = steplab::testing::tiny_reward(4, 2);
  instrument::MemorySweepConfig mc;
  mc.steps = {4, 8, 16};
  mc.strategies = {make(StrategyKind::EasyTune), make(StrategyKind::EasyTuneChain), make(StrategyKind::FullBackprop),
                   make(StrategyKind::DrTune), make(StrategyKind::Refl), make(StrategyKind::DraftK, 2)};
  const auto cells = instrument::memory_sweep(theta, phi, mc);
  auto peaks = [&](const std::string& name) {
    std::vector<double> out;
    for (const auto& c : cells) {
      if (c.strategy == name) out.push_back(static_cast<double>(c.peak_nodes));
    }
    return out;
  };
  for (const char* flat : {"easytune", "easytune_chain", "refl", "draft_k"}) {
    const auto p = peaks(flat);
    EXPECT_EQ(p[0], p[1]) << flat;
    EXPECT_EQ(p[1], p[2]) << flat;
  }
  for (const char* lin : {"full_backprop", "drtune"}) {
    const auto p = peaks(lin);
    EXPECT_GT(instrument::fit_line({4, 8, 16}, p).r2, 0.9999) << lin;
    EXPECT_GT(p[2], p[1]);
  }
}

TEST(Memory, DraftKGrowsWithWindow) {
  auto theta = steplab::testing::tiny_denoiser(4, 1);
  auto phi = steplab::testing::tiny_reward(4, 2);
  instrument::MemorySweepConfig mc;
  mc.steps = {16};
  mc.strategies = {make(StrategyKind::DraftK, 1), make(StrategyKind::DraftK, 4), make(StrategyKind::DraftK, 16),
                   make(StrategyKind::FullBackprop)};
  const auto cells = instrument::memory_sweep(theta, phi, mc);
  EXPECT_LT(cells[0].peak_nodes, cells[1].peak_nodes);
  EXPECT_LT(cells[1].peak_nodes, cells[2].peak_nodes);
  EXPECT_EQ(cells[2].peak_nodes, cells[3].peak_nodes);
  EXPECT_EQ(cells[1].window, 4);
}
