// SPDX-License-Identifier: Apache-2.0
#include "steplab/finetune.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "steplab/rng.hpp"

namespace steplab::finetune {

namespace diff = steplab::diffusion;

const char* strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::EasyTune: return "easytune";
    case StrategyKind::EasyTuneChain: return "easytune_chain";
    case StrategyKind::FullBackprop: return "full_backprop";
    case StrategyKind::DraftK: return "draft_k";
    case StrategyKind::DrTune: return "drtune";
    case StrategyKind::Refl: return "refl";
  }
  return "?";
}

StrategyKind parse_strategy(const std::string& s) {
  if (s == "easytune") return StrategyKind::EasyTune;
  if (s == "easytune-chain" || s == "easytune_chain") return StrategyKind::EasyTuneChain;
  if (s == "full" || s == "full_backprop" || s == "full-backprop") return StrategyKind::FullBackprop;
  if (s == "draft-k" || s == "draft_k") return StrategyKind::DraftK;
  if (s == "drtune") return StrategyKind::DrTune;
  if (s == "refl") return StrategyKind::Refl;
  throw std::invalid_argument("unknown strategy: " + s);
}

StepWeighting parse_weighting(const std::string& s) {
  StepWeighting w;
  auto with_k = [&](const std::string& prefix, WeightingKind kind) {
    if (s.rfind(prefix, 0) != 0) return false;
    w.kind = kind;
    const std::string rest = s.substr(prefix.size());
    if (rest.empty()) throw std::invalid_argument(prefix + " needs a step count, e.g. " + prefix + "20");
    std::size_t used = 0;
    w.k = std::stoi(rest, &used);
    if (used != rest.size() || w.k < 1) throw std::invalid_argument("bad step count in weighting: " + s);
    return true;
  };
  if (s == "uniform") return w;
  if (s == "linear_increasing" || s == "linear-increasing") {
    w.kind = WeightingKind::LinearIncreasing;
    return w;
  }
  if (s == "linear_decreasing" || s == "linear-decreasing") {
    w.kind = WeightingKind::LinearDecreasing;
    return w;
  }
  if (with_k("last_k:", WeightingKind::LastK) || with_k("first_k:", WeightingKind::FirstK)) return w;
  throw std::invalid_argument("unknown step weighting: " + s);
}

std::string weighting_name(const StepWeighting& w) {
  switch (w.kind) {
    case WeightingKind::Uniform: return "uniform";
    case WeightingKind::LastK: return "last_k:" + std::to_string(w.k);
    case WeightingKind::FirstK: return "first_k:" + std::to_string(w.k);
    case WeightingKind::LinearIncreasing: return "linear_increasing";
    case WeightingKind::LinearDecreasing: return "linear_decreasing";
  }
  return "?";
}

double step_weight(int t, int steps, const StepWeighting& w) {
  const double frac = static_cast<double>(steps - t) / static_cast<double>(steps);
  switch (w.kind) {
    case WeightingKind::Uniform: return 1.0;
    case WeightingKind::LastK: return t <= w.k ? 1.0 : 0.0;
    case WeightingKind::FirstK: return t > steps - w.k ? 1.0 : 0.0;
    case WeightingKind::LinearIncreasing: return frac + 0.5;
    case WeightingKind::LinearDecreasing: return -frac + 1.5;
  }
  return 1.0;
}

void validate(const StrategyConfig& config, int steps) {
  if (steps < 1) throw std::invalid_argument("need at least one diffusion step");
  if (!(config.kl_weight >= 0.0) || !std::isfinite(config.kl_weight)) {
    throw std::invalid_argument("kl_weight must be finite and >= 0");
  }
  if (config.kind == StrategyKind::DraftK && !config.randomized_k &&
      (config.draft_k < 1 || config.draft_k > steps)) {
    throw std::invalid_argument("draft_k requires 1 <= K <= T (K=" + std::to_string(config.draft_k) +
                                ", T=" + std::to_string(steps) + ")");
  }
  if (!(config.step_fraction > 0.0 && config.step_fraction <= 1.0)) {
    throw std::invalid_argument("step_fraction must be in (0, 1]");
  }
  const bool easy = config.kind == StrategyKind::EasyTune || config.kind == StrategyKind::EasyTuneChain;
  if (easy && config.reward_mode == models::RewardMode::OneStep && config.stochastic_sampler) {
    throw std::invalid_argument("one_step reward requires the deterministic sampler");
  }
  if ((config.weighting.kind == WeightingKind::LastK || config.weighting.kind == WeightingKind::FirstK) &&
      config.weighting.k < 1) {
    throw std::invalid_argument("last_k/first_k weighting needs k >= 1");
  }
}

int draw_window(const StrategyConfig& config, int steps, std::uint64_t seed) {
  if (config.kind == StrategyKind::Refl) {
    Rng rng(derive_seed(seed, "refl_t"));
    return std::uniform_int_distribution<int>(1, steps)(rng);
  }
  if (config.kind == StrategyKind::DraftK) {
    if (!config.randomized_k) return config.draft_k;
    Rng rng(derive_seed(seed, "draft_k"));
    return std::uniform_int_distribution<int>(1, steps)(rng);
  }
  return steps;
}

// ---------------------------------------------------------------------------
// Shared pieces

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

/// Noise for the ancestral sampler, drawn in the same order as
/// diffusion::sample_trajectory. Index by t (entry 0 unused).
std::vector<std::optional<Tensor>> ancestral_noise(const StrategyConfig& config, const Shape& shape, int steps,
                                                   std::uint64_t seed) {
  std::vector<std::optional<Tensor>> z(static_cast<std::size_t>(steps) + 1);
  if (!config.stochastic_sampler) return z;
  Rng rng(derive_seed(seed, "ancestral"));
  for (int t = steps; t >= 1; --t) z[static_cast<std::size_t>(t)] = standard_normal(shape, rng);
  return z;
}

/// A trajectory being rolled out step by step.
struct Rollout {
  int condition = 0;
  std::uint64_t seed = 0;
  std::vector<std::optional<Tensor>> noise;
  std::vector<Tensor> states;  // x_T first
  Tensor current() const { return states.back(); }
};

Rollout start_rollout(const models::DenoiserParams& theta, const StrategyConfig& config, int steps, int condition,
                      std::uint64_t seed) {
  const Shape shape{theta.config.motion_dim};
  Rollout r;
  r.condition = condition;
  r.seed = seed;
  r.noise = ancestral_noise(config, shape, steps, seed);
  r.states.reserve(static_cast<std::size_t>(steps) + 1);
  r.states.push_back(diff::initial_noise(shape, seed));
  return r;
}

/// Advances a rollout from its current state down to state `stop_t` without
/// keeping any graph. The tape is released after every step.
void advance_detached(ad::Tape& tape, models::DenoiserParams& theta, const diff::NoiseSchedule& schedule,
                      Rollout& r, int stop_t) {
  const int steps = schedule.steps();
  const auto eps = models::eps_fn(theta, r.condition, true);
  for (int t = steps + 1 - static_cast<int>(r.states.size()); t > stop_t; --t) {
    const ad::Value x = tape.constant(r.current());
    const auto step = diff::reverse_step_ex(tape, x, t, eps, schedule, diff::Detach::Input,
                                            r.noise[static_cast<std::size_t>(t)]);
    r.states.push_back(step.x_prev.data());
    tape.release_graph();
  }
}

int next_t(const Rollout& r, int steps) { return steps + 1 - static_cast<int>(r.states.size()); }

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void check_batch(const Batch& batch) {
  if (batch.conditions.empty()) throw std::invalid_argument("empty fine-tuning batch");
  if (batch.conditions.size() != batch.seeds.size()) {
    throw std::invalid_argument("batch conditions and seeds differ in length");
  }
}

double final_reward(models::RewardParams& phi, const std::vector<Rollout>& rollouts) {
  double acc = 0.0;
  for (const auto& r : rollouts) acc += models::clean_reward(phi, r.states.back(), r.condition);
  return acc / static_cast<double>(rollouts.size());
}

/// Reference-model reverse mean on the same (detached) input.
ad::Value reference_step(ad::Tape& tape, const FrozenReference& ref, ad::Value x_in, int t, int condition,
                         const diff::NoiseSchedule& schedule) {
  const ad::Value eps = models::denoiser_forward(tape, ref.for_binding(), x_in, t, condition, false);
  return diff::denoise_with_eps(tape, x_in, eps, diff::StepCoefficients::at(schedule, t));
}

/// Applies the accumulated grads of `grad_source` to `target` and fills the
/// bookkeeping of one optimizer update.
void apply_update(UpdateContext& ctx, ad::ParamSet& target, const ad::ParamSet& grad_source, double loss,
                  UpdateRecord& rec) {
  const double g = grad_source.grad_norm();
  rec.step_losses.push_back(loss);
  rec.step_grad_norms.push_back(g);
  if (!std::isfinite(loss) || !ctx.optimizer.step(target, grad_source)) {
    ++rec.skipped;
    return;
  }
  ++rec.updates;
}

void finish_record(UpdateRecord& rec, ad::Tape& tape, Clock::time_point start) {
  rec.graph = tape.release_graph();
  rec.millis = ms_since(start);
  rec.loss = mean(rec.step_losses);
  rec.grad_norm = mean(rec.step_grad_norms);
}

}  // namespace

ad::Value kl_augment(ad::Tape& tape, ad::Value loss, ad::Value x_prev, ad::Value x_prev_ref, double kl_weight) {
  if (kl_weight == 0.0) return loss;
  const ad::Value d = tape.sub(x_prev, x_prev_ref);
  return tape.add(loss, tape.scale(tape.dot(d, d), 0.5 * kl_weight));
}

// ---------------------------------------------------------------------------
// easytune

StepLoss easytune_step_loss(ad::Tape& tape, models::DenoiserParams& theta, models::RewardParams& phi,
                            ad::Value x_t, int t, int condition, const diff::NoiseSchedule& schedule,
                            const StrategyConfig& config, const FrozenReference* reference,
                            const std::optional<Tensor>& noise) {
  const auto eps = models::eps_fn(theta, condition, true);
  const auto step = diff::reverse_step_ex(tape, x_t, t, eps, schedule, diff::Detach::Input, noise);
  StepLoss out;
  out.x_prev = step.x_prev;
  if (config.reward_mode == models::RewardMode::NoiseAware) {
    out.reward = models::reward(tape, phi, step.x_prev, t - 1, condition, false);
  } else {
    const ad::Value x0_hat =
        diff::predict_x0_with_eps(tape, step.x_in, step.eps, diff::StepCoefficients::at(schedule, t));
    out.reward = models::reward(tape, phi, x0_hat, 0, condition, false);
  }
  const double w = step_weight(t, schedule.steps(), config.weighting);
  out.loss = tape.scale(out.reward, -w);
  if (config.kl_weight > 0.0) {
    if (reference == nullptr) throw std::invalid_argument("kl_weight > 0 needs a frozen reference");
    const ad::Value mean_theta = diff::denoise_with_eps(tape, step.x_in, step.eps, diff::StepCoefficients::at(schedule, t));
    const ad::Value mean_ref = reference_step(tape, *reference, step.x_in, t, condition, schedule);
    out.loss = kl_augment(tape, out.loss, mean_theta, mean_ref, config.kl_weight);
  }
  return out;
}

namespace {

/// Visited steps for one update, descending. With step_fraction = 1 every step.
std::vector<bool> visit_mask(const StrategyConfig& config, int steps, std::uint64_t seed) {
  std::vector<bool> mask(static_cast<std::size_t>(steps) + 1, config.step_fraction >= 1.0);
  mask[0] = false;
  if (config.step_fraction >= 1.0) return mask;
  const int n = std::max(1, static_cast<int>(std::lround(config.step_fraction * steps)));
  std::vector<int> ts(static_cast<std::size_t>(steps));
  std::iota(ts.begin(), ts.end(), 1);
  Rng rng(derive_seed(seed, "visit"));
  std::shuffle(ts.begin(), ts.end(), rng);
  for (int i = 0; i < n; ++i) mask[static_cast<std::size_t>(ts[static_cast<std::size_t>(i)])] = true;
  return mask;
}

/// Shared body of the two easytune variants. Gradients are taken at `rollout`
/// parameters; updates land on `target`.
UpdateRecord easytune_impl(UpdateContext& ctx, const Batch& batch, models::DenoiserParams& rollout,
                           ad::ParamSet& target, StrategyKind kind) {
  check_batch(batch);
  validate(ctx.config, ctx.schedule.steps());
  const auto start = Clock::now();
  const int steps = ctx.schedule.steps();
  UpdateRecord rec;
  rec.iteration = ctx.iteration;
  rec.strategy = kind;

  std::vector<Rollout> rs;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    rs.push_back(start_rollout(rollout, ctx.config, steps, batch.conditions[b], batch.seeds[b]));
  }
  const auto mask = visit_mask(ctx.config, steps, derive_seed(batch.seeds.front(), "iteration", ctx.iteration));
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  ad::Tape tape;
  for (int t = steps; t >= 1; --t) {
    const auto ti = static_cast<std::size_t>(t);
    if (!mask[ti]) {
      for (auto& r : rs) advance_detached(tape, rollout, ctx.schedule, r, t - 1);
      continue;
    }
    rollout.params.zero_grad();
    ad::Value total;
    double reward_acc = 0.0;
    for (auto& r : rs) {
      const ad::Value x = tape.constant(r.current());
      const StepLoss sl =
          easytune_step_loss(tape, rollout, ctx.phi, x, t, r.condition, ctx.schedule, ctx.config, ctx.reference,
                             r.noise[ti]);
      r.states.push_back(sl.x_prev.data());
      reward_acc += sl.reward.item();
      const ad::Value scaled = tape.scale(sl.loss, inv_b);
      total = total.valid() ? tape.add(total, scaled) : scaled;
    }
    const double loss = total.item();
    if (std::isfinite(loss)) tape.backward(total);
    tape.release_graph();
    rec.steps.push_back(t);
    rec.step_rewards.push_back(reward_acc * inv_b);
    apply_update(ctx, target, rollout.params, loss, rec);
  }
  rec.final_reward = final_reward(ctx.phi, rs);
  if (ctx.record_states) {
    for (auto& r : rs) rec.states.push_back(std::move(r.states));
  }
  finish_record(rec, tape, start);
  return rec;
}

}  // namespace

UpdateRecord easytune_update(UpdateContext& ctx, const Batch& batch) {
  return easytune_impl(ctx, batch, ctx.theta, ctx.theta.params, StrategyKind::EasyTune);
}

UpdateRecord easytune_chain_update(UpdateContext& ctx, const Batch& batch) {
  models::DenoiserParams working = ctx.theta;
  UpdateRecord rec = easytune_impl(ctx, batch, ctx.theta, working.params, StrategyKind::EasyTuneChain);
  for (std::size_t i = 0; i < working.params.size(); ++i) {
    ctx.theta.params.at(i).value = working.params.at(i).value;
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Trajectory-level strategies

namespace {

/// First timestep whose step is part of the differentiable window.
int window_top(const StrategyConfig& config, int steps, int window) {
  switch (config.kind) {
    case StrategyKind::DraftK: return window;
    case StrategyKind::Refl: return window;
    default: return steps;
  }
}

/// Builds the attached part of one trajectory, starting from the rollout's
/// current state. Returns the per-trajectory loss.
ad::Value build_window(ad::Tape& tape, models::DenoiserParams& theta, models::RewardParams& phi,
                       const diff::NoiseSchedule& schedule, const StrategyConfig& config,
                       const FrozenReference* reference, Rollout& r) {
  const int top = next_t(r, schedule.steps());
  const auto eps = models::eps_fn(theta, r.condition, true);
  // sg at the window entry: the prefix state is a value, not a function of theta
  ad::Value x = tape.stop_gradient(tape.constant(r.current()));

  if (config.kind == StrategyKind::Refl) {
    const auto k = diff::StepCoefficients::at(schedule, top);
    const ad::Value x_in = x;
    const ad::Value e = eps(tape, x_in, top);
    const ad::Value x0_hat = diff::predict_x0_with_eps(tape, x_in, e, k);
    ad::Value loss = tape.neg(models::reward(tape, phi, x0_hat, 0, r.condition, false));
    if (config.kl_weight > 0.0) {
      if (reference == nullptr) throw std::invalid_argument("kl_weight > 0 needs a frozen reference");
      const ad::Value mean_theta = diff::denoise_with_eps(tape, x_in, e, k);
      loss = kl_augment(tape, loss, mean_theta, reference_step(tape, *reference, x_in, top, r.condition, schedule),
                        config.kl_weight);
    }
    return loss;
  }

  const diff::Detach detach = config.kind == StrategyKind::DrTune ? diff::Detach::EpsInput : diff::Detach::None;
  ad::Value kl;
  for (int t = top; t >= 1; --t) {
    const auto step = diff::reverse_step_ex(tape, x, t, eps, schedule, detach, r.noise[static_cast<std::size_t>(t)]);
    if (config.kl_weight > 0.0) {
      if (reference == nullptr) throw std::invalid_argument("kl_weight > 0 needs a frozen reference");
      const ad::Value x_in = tape.stop_gradient(x);
      const ad::Value mean_theta =
          diff::denoise_with_eps(tape, x_in, eps(tape, x_in, t), diff::StepCoefficients::at(schedule, t));
      const ad::Value mean_ref = reference_step(tape, *reference, x_in, t, r.condition, schedule);
      const ad::Value term = kl_augment(tape, tape.constant(Tensor::scalar(0.0)), mean_theta, mean_ref,
                                        config.kl_weight);
      kl = kl.valid() ? tape.add(kl, term) : term;
    }
    x = step.x_prev;
    r.states.push_back(x.data());
  }
  ad::Value loss = tape.neg(models::reward(tape, phi, x, 0, r.condition, false));
  if (kl.valid()) loss = tape.add(loss, kl);
  return loss;
}

UpdateRecord trajectory_update(UpdateContext& ctx, const Batch& batch) {
  check_batch(batch);
  validate(ctx.config, ctx.schedule.steps());
  const auto start = Clock::now();
  const int steps = ctx.schedule.steps();
  UpdateRecord rec;
  rec.iteration = ctx.iteration;
  rec.strategy = ctx.config.kind;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  ad::Tape tape;
  std::vector<Rollout> rs;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto r = start_rollout(ctx.theta, ctx.config, steps, batch.conditions[b], batch.seeds[b]);
    const int window = draw_window(ctx.config, steps, batch.seeds[b]);
    if (b == 0) rec.window = ctx.config.kind == StrategyKind::DraftK || ctx.config.kind == StrategyKind::Refl ? window : 0;
    advance_detached(tape, ctx.theta, ctx.schedule, r, window_top(ctx.config, steps, window));
    rs.push_back(std::move(r));
  }

  ctx.theta.params.zero_grad();
  ad::Value total;
  for (auto& r : rs) {
    const ad::Value scaled = tape.scale(build_window(tape, ctx.theta, ctx.phi, ctx.schedule, ctx.config,
                                                     ctx.reference, r),
                                        inv_b);
    total = total.valid() ? tape.add(total, scaled) : scaled;
  }
  const double loss = total.item();
  if (std::isfinite(loss)) tape.backward(total);
  rec.graph = tape.release_graph();

  // ReFL stops at x_t; finish the rollout with the pre-update parameters so
  // the logged trajectory and reward are comparable.
  if (ctx.config.kind == StrategyKind::Refl) {
    for (auto& r : rs) advance_detached(tape, ctx.theta, ctx.schedule, r, 0);
  }

  rec.steps.push_back(ctx.config.kind == StrategyKind::Refl ? rec.window : 0);
  rec.final_reward = final_reward(ctx.phi, rs);
  rec.step_rewards.push_back(rec.final_reward);
  apply_update(ctx, ctx.theta.params, ctx.theta.params, loss, rec);
  if (ctx.record_states) {
    for (auto& r : rs) rec.states.push_back(std::move(r.states));
  }
  const ad::GraphStats peak = rec.graph;
  finish_record(rec, tape, start);
  rec.graph = peak;
  return rec;
}

}  // namespace

TrajectoryLoss trajectory_loss(ad::Tape& tape, models::DenoiserParams& theta, models::RewardParams& phi,
                               int condition, std::uint64_t seed, const diff::NoiseSchedule& schedule,
                               const StrategyConfig& config, const FrozenReference* reference) {
  validate(config, schedule.steps());
  const int steps = schedule.steps();
  Rollout r = start_rollout(theta, config, steps, condition, seed);
  TrajectoryLoss out;
  out.window = draw_window(config, steps, seed);
  advance_detached(tape, theta, schedule, r, window_top(config, steps, out.window));
  out.loss = build_window(tape, theta, phi, schedule, config, reference, r);
  out.states = std::move(r.states);
  return out;
}

UpdateRecord full_backprop_update(UpdateContext& ctx, const Batch& batch) {
  if (ctx.config.kind != StrategyKind::FullBackprop) throw std::invalid_argument("config is not full_backprop");
  return trajectory_update(ctx, batch);
}

UpdateRecord draft_k_update(UpdateContext& ctx, const Batch& batch) {
  if (ctx.config.kind != StrategyKind::DraftK) throw std::invalid_argument("config is not draft_k");
  return trajectory_update(ctx, batch);
}

UpdateRecord drtune_update(UpdateContext& ctx, const Batch& batch) {
  if (ctx.config.kind != StrategyKind::DrTune) throw std::invalid_argument("config is not drtune");
  return trajectory_update(ctx, batch);
}

UpdateRecord refl_update(UpdateContext& ctx, const Batch& batch) {
  if (ctx.config.kind != StrategyKind::Refl) throw std::invalid_argument("config is not refl");
  return trajectory_update(ctx, batch);
}

UpdateRecord run_update(UpdateContext& ctx, const Batch& batch) {
  switch (ctx.config.kind) {
    case StrategyKind::EasyTune: return easytune_update(ctx, batch);
    case StrategyKind::EasyTuneChain: return easytune_chain_update(ctx, batch);
    default: return trajectory_update(ctx, batch);
  }
}

// ---------------------------------------------------------------------------
// Logging

UpdateLog::UpdateLog(std::ostream& os, bool write_header) : os_(os) {
  if (write_header) os_ << kHeader << '\n';
}

void UpdateLog::append(const UpdateRecord& rec) {
  const char* name = strategy_name(rec.strategy);
  auto row = [&](int t, double reward, double loss, double g) {
    os_ << rec.iteration << ',' << name << ',' << t << ',' << reward << ',' << loss << ',' << g << ','
        << rec.graph.peak_nodes << ',' << rec.graph.peak_elements << ',' << rec.millis << '\n';
    ++row_;
  };
  const auto saved = os_.precision(10);
  for (std::size_t i = 0; i < rec.step_losses.size(); ++i) {
    const int t = i < rec.steps.size() ? rec.steps[i] : 0;
    row(t, rec.final_reward, rec.step_losses[i], rec.step_grad_norms[i]);
  }
  os_.precision(saved);
}

}  // namespace steplab::finetune
