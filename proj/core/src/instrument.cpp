// SPDX-License-Identifier: Apache-2.0
#include "steplab/instrument.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace steplab::instrument {

namespace diff = steplab::diffusion;

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double v = a[i * k + p];
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += v * b[p * m + j];
    }
  }
  return out;
}

double frobenius(const Tensor& m) { return m.norm(); }

namespace {

Tensor identity(std::size_t n) {
  Tensor id({n, n});
  for (std::size_t i = 0; i < n; ++i) id[i * n + i] = 1.0;
  return id;
}

void check_dense(std::size_t dim) {
  if (dim > kMaxDenseDim) {
    throw std::invalid_argument("dense Jacobian assembly limited to dim <= " + std::to_string(kMaxDenseDim) +
                                " (got " + std::to_string(dim) + ")");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Unrolled oracle

std::vector<std::vector<double>> assemble_unrolled(const Tensor& reward_grad, const std::vector<Tensor>& jac_x,
                                                   const std::vector<Tensor>& jac_theta) {
  const std::size_t steps = jac_theta.size();
  const std::size_t dim = reward_grad.size();
  std::vector<std::vector<double>> terms;
  // v holds g^T J_x(1) ... J_x(t-1)
  std::vector<double> v(reward_grad.raw());
  for (std::size_t t = 1; t <= steps; ++t) {
    const Tensor& jt = jac_theta[t - 1];
    const std::size_t p = jt.shape()[1];
    std::vector<double> term(p, 0.0);
    for (std::size_t i = 0; i < dim; ++i) {
      if (v[i] == 0.0) continue;
      for (std::size_t j = 0; j < p; ++j) term[j] -= v[i] * jt[i * p + j];
    }
    terms.push_back(std::move(term));
    if (t < steps) {
      const Tensor& jx = jac_x[t - 1];
      std::vector<double> next(dim, 0.0);
      for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < dim; ++j) next[j] += v[i] * jx[i * dim + j];
      }
      v = std::move(next);
    }
  }
  return terms;
}

UnrolledGradient unrolled_gradient_oracle(models::DenoiserParams& theta, models::RewardParams& phi, int condition,
                                          const diff::NoiseSchedule& schedule, std::uint64_t seed) {
  const std::size_t dim = theta.config.motion_dim;
  check_dense(dim);
  const int steps = schedule.steps();
  UnrolledGradient out;

  // values of the trajectory
  ad::Tape tape;
  const auto eps = models::eps_fn(theta, condition, true);
  const auto traj = diff::sample_trajectory(tape, eps, condition, {dim}, schedule, diff::Retention::Stepwise, seed,
                                            {false, true});
  tape.release_graph();

  std::vector<ad::Value> leaves;
  out.jac_x.resize(static_cast<std::size_t>(steps));
  out.jac_theta.resize(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    const ad::Value x = tape.variable(traj.state(t));
    const ad::Value y = diff::reverse_step(tape, x, t, eps, schedule);
    const ad::Value xs[] = {x};
    out.jac_x[static_cast<std::size_t>(t - 1)] = tape.jacobian(y, xs);
    leaves.clear();
    for (auto& p : theta.params) leaves.push_back(tape.parameter(p));
    out.jac_theta[static_cast<std::size_t>(t - 1)] = tape.jacobian(y, leaves);
    tape.release_graph();
  }

  const ad::Value x0 = tape.variable(traj.x0());
  tape.backward(models::reward(tape, phi, x0, 0, condition, false));
  out.reward_grad = x0.grad();
  tape.release_graph();
  theta.params.zero_grad();

  out.terms = assemble_unrolled(out.reward_grad, out.jac_x, out.jac_theta);
  out.total.assign(theta.params.numel(), 0.0);
  for (const auto& term : out.terms) {
    for (std::size_t j = 0; j < term.size(); ++j) out.total[j] += term[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Jacobian profile

JacobianReport jacobian_profile(const StepMap& step, const Tensor& x_T, int steps) {
  const std::size_t dim = x_T.size();
  check_dense(dim);
  if (steps < 1) throw std::invalid_argument("profile needs at least one step");
  JacobianReport rep;
  rep.dim = dim;
  const double scale = 1.0 / static_cast<double>(dim);
  ad::Tape tape;
  Tensor x = x_T;
  // states[t] for t = T..1 are visited in sampling order; store J_t by t.
  rep.step_jacobians.resize(static_cast<std::size_t>(steps));
  for (int t = steps; t >= 1; --t) {
    const ad::Value xv = tape.variable(x);
    const ad::Value y = step(tape, xv, t);
    const ad::Value xs[] = {xv};
    rep.step_jacobians[static_cast<std::size_t>(t - 1)] = tape.jacobian(y, xs);
    x = y.data();
    tape.release_graph();
  }
  Tensor prod = identity(dim);
  for (int t = 1; t <= steps; ++t) {
    const Tensor& j = rep.step_jacobians[static_cast<std::size_t>(t - 1)];
    rep.step_norm.push_back(frobenius(j) * scale);
    rep.cumulative_norm.push_back(frobenius(prod) * scale);
    prod = matmul(prod, j);
  }
  return rep;
}

JacobianReport jacobian_profile(models::DenoiserParams& theta, int condition, const diff::NoiseSchedule& schedule,
                                std::uint64_t seed) {
  const auto eps = models::eps_fn(theta, condition, false);
  const StepMap map = [&](ad::Tape& tape, ad::Value x, int t) { return diff::reverse_step(tape, x, t, eps, schedule); };
  return jacobian_profile(map, diff::initial_noise({theta.config.motion_dim}, seed), schedule.steps());
}

// ---------------------------------------------------------------------------
// Memory sweep

std::vector<MemoryCell> memory_sweep(const models::DenoiserParams& theta, models::RewardParams& phi,
                                     const MemorySweepConfig& config) {
  std::vector<MemoryCell> cells;
  for (const auto& strategy : config.strategies) {
    for (int steps : config.steps) {
      const auto schedule = diff::make_schedule(steps, config.beta_start, config.beta_end);
      models::DenoiserParams copy = theta;
      models::Adam opt(copy.params, {{1e-4, models::LrDecay::Constant}});
      finetune::FrozenReference ref(theta);
      finetune::StrategyConfig sc = strategy;
      if (sc.kind == finetune::StrategyKind::DraftK) sc.draft_k = std::min(sc.draft_k, steps);
      finetune::UpdateContext ctx{copy, phi, schedule, sc, opt, &ref};
      const finetune::Batch batch{{config.condition}, {config.seed}};
      const auto rec = finetune::run_update(ctx, batch);
      MemoryCell cell;
      cell.steps = steps;
      cell.strategy = finetune::strategy_name(sc.kind);
      cell.window = sc.kind == finetune::StrategyKind::DraftK ? sc.draft_k : rec.window;
      cell.peak_nodes = rec.graph.peak_nodes;
      cell.peak_elements = rec.graph.peak_elements;
      cells.push_back(cell);
    }
  }
  return cells;
}

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_line needs >= 2 paired points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit f;
  f.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

// ---------------------------------------------------------------------------
// Descent

DescentVerdict judge_descent(const std::vector<DescentPoint>& points, std::size_t window) {
  DescentVerdict v;
  if (points.empty()) return v;
  const std::size_t n = points.size();
  const std::size_t w = std::clamp<std::size_t>(window == 0 ? n / 4 : window, 1, n);
  double first = 0.0, last = 0.0;
  double gmin_first = std::numeric_limits<double>::infinity();
  double gmin_last = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < w; ++i) {
    first += points[i].loss;
    gmin_first = std::min(gmin_first, points[i].grad_norm);
    last += points[n - w + i].loss;
    gmin_last = std::min(gmin_last, points[n - w + i].grad_norm);
  }
  v.first_loss = first / static_cast<double>(w);
  v.last_loss = last / static_cast<double>(w);
  v.first_min_grad = gmin_first;
  v.last_min_grad = gmin_last;
  v.loss_ok = v.last_loss <= v.first_loss;
  v.gradient_ok = v.last_min_grad <= v.first_min_grad;
  return v;
}

DescentTrace descent_check(const DescentStep& step, const models::LrSchedule& lr, std::size_t iterations,
                           std::size_t window) {
  DescentTrace trace;
  trace.points.reserve(iterations);
  for (std::size_t k = 0; k < iterations; ++k) {
    const double eta = lr.at(k);
    const auto [loss, g] = step(k, eta);
    trace.points.push_back({k, eta, loss, g});
  }
  trace.verdict = judge_descent(trace.points, window);
  return trace;
}

}  // namespace steplab::instrument
