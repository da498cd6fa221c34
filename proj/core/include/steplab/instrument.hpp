// SPDX-License-Identifier: Apache-2.0
//
// Numerical instruments: the unrolled trajectory-gradient oracle built from
// dense per-step Jacobians, Jacobian norm profiles along a trajectory,
// retained-node sweeps over T, and descent/stationarity traces.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "steplab/diffusion.hpp"
#include "steplab/finetune.hpp"
#include "steplab/models.hpp"

namespace steplab::instrument {

/// Largest motion dimension accepted by the dense-Jacobian tools.
inline constexpr std::size_t kMaxDenseDim = 64;

struct UnrolledGradient {
  /// dL/dtheta flattened in parameter declaration order, L = -R(x_0, 0, c).
  std::vector<double> total;
  /// terms[t-1] is the contribution routed through step t.
  std::vector<std::vector<double>> terms;
  /// Per step t (index t-1): d pi(x_t)/d x_t [dim, dim] and d pi(x_t)/d theta [dim, P].
  std::vector<Tensor> jac_x;
  std::vector<Tensor> jac_theta;
  /// dR(x_0, 0, c)/dx_0.
  Tensor reward_grad;
};

/// Sums -g^T (J_x(1) ... J_x(t-1)) J_theta(t) over t from given matrices.
std::vector<std::vector<double>> assemble_unrolled(const Tensor& reward_grad, const std::vector<Tensor>& jac_x,
                                                   const std::vector<Tensor>& jac_theta);

/// Deterministic sampler only. Throws std::invalid_argument for motion_dim
/// above kMaxDenseDim.
UnrolledGradient unrolled_gradient_oracle(models::DenoiserParams& theta, models::RewardParams& phi, int condition,
                                          const diffusion::NoiseSchedule& schedule, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Jacobian profile

/// x_{t-1} = step(tape, x_t, t).
using StepMap = std::function<ad::Value(ad::Tape&, ad::Value x, int t)>;

struct JacobianReport {
  std::size_t dim = 0;
  /// step_norm[t-1] = ||d x_{t-1} / d x_t||_F / dim.
  std::vector<double> step_norm;
  /// cumulative_norm[t-1] = ||J_1 J_2 ... J_{t-1}||_F / dim; t = 1 is the
  /// empty product (identity).
  std::vector<double> cumulative_norm;
  /// Dense per-step Jacobians, index t-1.
  std::vector<Tensor> step_jacobians;
};

JacobianReport jacobian_profile(const StepMap& step, const Tensor& x_T, int steps);
JacobianReport jacobian_profile(models::DenoiserParams& theta, int condition, const diffusion::NoiseSchedule& schedule,
                                std::uint64_t seed);

/// Row-major product of square matrices.
Tensor matmul(const Tensor& a, const Tensor& b);
double frobenius(const Tensor& m);

// ---------------------------------------------------------------------------
// Memory sweep

struct MemoryCell {
  int steps = 0;
  std::string strategy;
  int window = 0;
  std::size_t peak_nodes = 0;
  std::size_t peak_elements = 0;
};

struct MemorySweepConfig {
  std::vector<int> steps{10, 25, 50};
  std::vector<finetune::StrategyConfig> strategies;
  double beta_start = diffusion::kDefaultBetaStart;
  double beta_end = diffusion::kDefaultBetaEnd;
  int condition = 0;
  std::uint64_t seed = 0;
};

/// One update per (strategy, T) on a private copy of theta.
std::vector<MemoryCell> memory_sweep(const models::DenoiserParams& theta, models::RewardParams& phi,
                                     const MemorySweepConfig& config);

/// Least-squares fit y = a + b x with coefficient of determination.
struct LinearFit {
  double intercept = 0.0;
  double slope = 0.0;
  double r2 = 0.0;
};
LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------
// Descent check

struct DescentPoint {
  std::size_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct DescentVerdict {
  double first_loss = 0.0;  ///< mean loss over the first window
  double last_loss = 0.0;   ///< mean loss over the final window
  double first_min_grad = 0.0;
  double last_min_grad = 0.0;
  bool loss_ok = false;      ///< (a) last_loss <= first_loss
  bool gradient_ok = false;  ///< (b) last_min_grad <= first_min_grad
};

struct DescentTrace {
  std::vector<DescentPoint> points;
  DescentVerdict verdict;
};

/// One optimizer update at iteration k with step size lr; returns (loss, grad norm).
using DescentStep = std::function<std::pair<double, double>(std::size_t k, double lr)>;

/// Runs `iterations` updates and judges the first and last `window` points
/// (0 means a quarter of the run).
DescentTrace descent_check(const DescentStep& step, const models::LrSchedule& lr, std::size_t iterations,
                           std::size_t window = 0);

DescentVerdict judge_descent(const std::vector<DescentPoint>& points, std::size_t window);

}  // namespace steplab::instrument
