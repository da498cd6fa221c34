// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "steplab/diffusion.hpp"
#include "steplab/models.hpp"

using namespace steplab;
using namespace steplab::diffusion;
using steplab::ad::Tape;
using steplab::ad::Value;

namespace {

EpsFn constant_eps(Tensor eps) {
  return [eps](Tape& tape, Value, int) { return tape.constant(eps); };
}

}  // namespace

TEST(Schedule, TwoStepProducts) {
  NoiseSchedule s({0.1, 0.2});
  EXPECT_DOUBLE_EQ(s.alpha(1), 0.9);
  EXPECT_DOUBLE_EQ(s.alpha(2), 0.8);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9);
  EXPECT_DOUBLE_EQ(s.alpha_bar(2), 0.9 * 0.8);
}

TEST(Schedule, SingleStep) {
  const auto s = make_schedule(1, 0.5, 0.5);
  EXPECT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
}

TEST(Schedule, DefaultMatchesProductLoop) {
  const auto s = make_schedule(kDefaultSteps, kDefaultBetaStart, kDefaultBetaEnd);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(50), 0.02);
  // independent evaluation of prod (1 - beta_i)
  EXPECT_NEAR(s.alpha_bar(50), 0.602951597329715, 1e-14);
}

TEST(Schedule, RejectsBadBounds) {
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule({0.1, 1.0}), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule(std::vector<double>{}), std::invalid_argument);
  const auto s = make_schedule(4, 0.1, 0.2);
  EXPECT_THROW((void)s.beta(0), std::out_of_range);
  EXPECT_THROW((void)s.beta(5), std::out_of_range);
}

TEST(Schedule, InvariantsOverRandomEndpoints) {
  Rng rng(derive_seed(7, "schedule_property"));
  std::uniform_real_distribution<double> u(1e-6, 0.5);
  std::uniform_int_distribution<int> steps(1, 200);
  for (int trial = 0; trial < 200; ++trial) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    const int n = steps(rng);
    const auto s = make_schedule(n, a, b);
    ASSERT_EQ(s.steps(), n);
    for (int t = 1; t <= n; ++t) {
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
      EXPECT_EQ(s.alpha(t), 1.0 - s.beta(t));
      EXPECT_EQ(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
      EXPECT_GT(s.alpha_bar(t), 0.0);
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
}

TEST(ForwardNoise, Examples) {
  const auto x0 = Tensor::vector({2.0});
  EXPECT_EQ(forward_noise(x0, 1.0, Tensor::vector({5.0})), x0);
  EXPECT_DOUBLE_EQ(forward_noise(x0, 0.25, Tensor::vector({0.0}))[0], 1.0);
  const auto s = make_schedule(4, 0.1, 0.2);
  EXPECT_THROW(forward_noise(x0, 0, x0, s), std::out_of_range);
  EXPECT_THROW(forward_noise(x0, 5, x0, s), std::out_of_range);
  EXPECT_THROW(forward_noise(x0, 0.5, Tensor::vector({1.0, 2.0})), ShapeError);
}

TEST(ForwardNoise, OneStepPredictInvertsWithTrueNoise) {
  const auto s = make_schedule(50, 1e-4, 0.02);
  Rng rng(3);
  for (int t : {1, 7, 25, 50}) {
    const auto x0 = standard_normal({6}, rng);
    const auto eps = standard_normal({6}, rng);
    const auto xt = forward_noise(x0, t, eps, s);
    Tape tape;
    const auto rec = one_step_predict(tape, tape.constant(xt), t, constant_eps(eps), s).data();
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(rec[i], x0[i], 1e-12);
  }
}

TEST(ReverseStep, ScalarExample) {
  Tape tape;
  const StepCoefficients k{0.96, 0.04, 0.81};
  const auto y = denoise_with_eps(tape, tape.constant(Tensor::scalar(1.0)), tape.constant(Tensor::scalar(0.5)), k);
  EXPECT_NEAR(y.item(), 0.9737914355805729, 1e-14);
}

TEST(ReverseStep, IdentityLimitAndZeroEps) {
  Tape tape;
  const auto x = tape.constant(Tensor::vector({0.3, -1.2}));
  const auto eps = tape.constant(Tensor::vector({4.0, -9.0}));
  const auto same = denoise_with_eps(tape, x, eps, {1.0, 0.0, 0.5});
  EXPECT_EQ(same.data(), x.data());
  const auto y = denoise_with_eps(tape, x, tape.constant(Tensor::vector({0, 0})), {0.9, 0.1, 0.6});
  EXPECT_NEAR(y.data()[0], 0.3 / std::sqrt(0.9), 1e-15);
  EXPECT_THROW(denoise_with_eps(tape, x, eps, {1.0, 0.0, 1.0}), std::domain_error);
}

TEST(OneStepPredict, Examples) {
  Tape tape;
  const StepCoefficients k{0.96, 0.04, 0.81};
  auto x0 = predict_x0_with_eps(tape, tape.constant(Tensor::scalar(1.0)), tape.constant(Tensor::scalar(0.5)), k);
  EXPECT_NEAR(x0.item(), 0.8689500586921849, 1e-14);
  auto z = predict_x0_with_eps(tape, tape.constant(Tensor::scalar(1.8)), tape.constant(Tensor::scalar(0.0)), k);
  EXPECT_NEAR(z.item(), 2.0, 1e-15);
}

TEST(ReverseStep, SgVariantIsValueIdenticalAndCutsInput) {
  auto theta = steplab::testing::tiny_denoiser(3, 1);
  const auto s = steplab::testing::random_schedule(4, 2);
  const auto x = Tensor::vector({0.4, -0.1, 0.9});
  const auto eps = models::eps_fn(theta, 1);

  Tape tape;
  const auto xv = tape.variable(x);
  const auto full = reverse_step(tape, xv, 3, eps, s);
  const auto sg = reverse_step_sg(tape, xv, 3, eps, s);
  EXPECT_EQ(full.data(), sg.data());
  tape.backward(tape.sum(sg));
  EXPECT_EQ(xv.grad(), Tensor::zeros_like(x));
}

TEST(ReverseStep, SgParamJacobianEqualsDirectTerm) {
  auto theta = steplab::testing::tiny_denoiser(3, 4);
  const auto s = steplab::testing::random_schedule(4, 5);
  const auto eps = models::eps_fn(theta, 2);
  const auto x = Tensor::vector({-0.7, 0.2, 0.5});
  auto jac = [&](bool sg) {
    Tape tape;
    const auto xv = tape.variable(x);
    const auto y = sg ? reverse_step_sg(tape, xv, 2, eps, s) : reverse_step(tape, xv, 2, eps, s);
    std::vector<Value> leaves;
    for (auto& p : theta.params) leaves.push_back(tape.parameter(p));
    return tape.jacobian(y, leaves);
  };
  EXPECT_EQ(jac(true), jac(false));
}

TEST(ReverseStep, EpsInputKeepsRecurrence) {
  auto theta = steplab::testing::tiny_denoiser(3, 6);
  const auto s = steplab::testing::random_schedule(4, 7);
  const auto eps = models::eps_fn(theta, 0);
  Tape tape;
  const auto xv = tape.variable(Tensor::vector({0.1, 0.2, 0.3}));
  const auto r = reverse_step_ex(tape, xv, 4, eps, s, Detach::EpsInput);
  const Value xs[] = {xv};
  const auto j = tape.jacobian(r.x_prev, xs);
  const double d = 1.0 / std::sqrt(s.alpha(4));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(j[i * 3 + k], i == k ? d : 0.0, 1e-15);
  }
  EXPECT_EQ(r.x_prev.data(), reverse_step(tape, xv, 4, eps, s).data());
}

TEST(ReverseStep, NoiseOnlyAboveFirstStep) {
  const auto s = make_schedule(3, 0.1, 0.3);
  const auto zero = constant_eps(Tensor::vector({0.0}));
  Tape tape;
  const auto x = tape.constant(Tensor::vector({1.0}));
  const Tensor z = Tensor::vector({2.0});
  const auto with = reverse_step_ex(tape, x, 2, zero, s, Detach::None, z).x_prev.item();
  EXPECT_NEAR(with, 1.0 / std::sqrt(s.alpha(2)) + std::sqrt(s.beta(2)) * 2.0, 1e-15);
  const auto last = reverse_step_ex(tape, x, 1, zero, s, Detach::None, z).x_prev.item();
  EXPECT_DOUBLE_EQ(last, 1.0 / std::sqrt(s.alpha(1)));
}

TEST(Sampling, ModesProduceIdenticalValues) {
  auto theta = steplab::testing::tiny_denoiser(4, 8);
  const auto s = make_schedule(20, 1e-4, 0.02);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tape a, b, c;
    const auto eps = models::eps_fn(theta, 1);
    const auto full = sample_trajectory(a, eps, 1, {4}, s, Retention::Full, seed);
    const auto step = sample_trajectory(b, eps, 1, {4}, s, Retention::Stepwise, seed);
    const auto rel = sample_trajectory(c, eps, 1, {4}, s, Retention::Stepwise, seed, {false, true});
    EXPECT_EQ(full.states, step.states);
    EXPECT_EQ(full.states, rel.states);
    EXPECT_EQ(full.states.size(), 21u);
  }
}

TEST(Sampling, DeterministicAndSeedSensitive) {
  auto theta = steplab::testing::tiny_denoiser(4, 9);
  const auto s = make_schedule(10, 1e-4, 0.02);
  const auto eps = models::eps_fn(theta, 0, false);
  auto run = [&](std::uint64_t seed, bool stochastic) {
    Tape tape;
    return sample_trajectory(tape, eps, 0, {4}, s, Retention::Stepwise, seed, {stochastic, true}).states;
  };
  EXPECT_EQ(run(3, false), run(3, false));
  EXPECT_EQ(run(3, true), run(3, true));
  EXPECT_NE(run(3, false), run(4, false));
  EXPECT_NE(run(3, false).back(), run(3, true).back());
  EXPECT_EQ(run(3, false).front(), initial_noise({4}, 3));
}

TEST(Sampling, SingleStepTrajectory) {
  auto theta = steplab::testing::tiny_denoiser(2, 1);
  const auto s = make_schedule(1, 0.1, 0.1);
  Tape tape;
  const auto traj = sample_trajectory(tape, models::eps_fn(theta, 0), 0, {2}, s, Retention::Full, 1);
  EXPECT_EQ(traj.states.size(), 2u);
  EXPECT_EQ(traj.state(1), traj.states.front());
  EXPECT_EQ(traj.state(0), traj.x0());
}

TEST(Sampling, RetainedNodesFullLinearStepwiseConstant) {
  auto theta = steplab::testing::tiny_denoiser(4, 2);
  std::vector<std::size_t> full, stepwise;
  for (int T : {5, 10, 20}) {
    const auto s = make_schedule(T, 1e-4, 0.02);
    const auto eps = models::eps_fn(theta, 1);
    Tape a;
    sample_trajectory(a, eps, 1, {4}, s, Retention::Full, 1);
    full.push_back(a.stats().peak_nodes);
    Tape b;
    sample_trajectory(b, eps, 1, {4}, s, Retention::Stepwise, 1, {false, true});
    stepwise.push_back(b.stats().peak_nodes);
  }
  EXPECT_EQ(stepwise[0], stepwise[1]);
  EXPECT_EQ(stepwise[1], stepwise[2]);
  // exact affine growth: equal increments per added step
  EXPECT_EQ((full[1] - full[0]) * 2, full[2] - full[1]);
  EXPECT_GT(full[2], full[1]);
}

TEST(Sampling, FullRetentionGradientMatchesFiniteDifferences) {
  auto theta = steplab::testing::tiny_denoiser(3, 11);
  const auto s = steplab::testing::random_schedule(4, 12);
  auto f = [&](Tape& tape) {
    const auto traj = sample_trajectory(tape, models::eps_fn(theta, 2), 2, {3}, s, Retention::Full, 5);
    return tape.sum(tape.mul(traj.final_state, traj.final_state));
  };
  auto params = steplab::testing::param_ptrs(theta.params);
  EXPECT_LT(ad::finite_diff_check(f, params).max_rel_error, 1e-4);
}
