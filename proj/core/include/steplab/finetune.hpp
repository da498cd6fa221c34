// SPDX-License-Identifier: Apache-2.0
//
// Reward fine-tuning strategies for the toy denoiser.
//
//   easytune        per-step update on pi(sg(x_t)), graph released every step
//   easytune_chain  as above, updates accumulate in a working copy that is
//                   assigned back after the rollout
//   full_backprop   one backward through the whole trajectory
//   draft_k         backward through the last K steps only
//   drtune          eps inputs detached, linear recurrence on x kept
//   refl            one-step prediction at a random t, single denoiser call
//
// All strategies share one arithmetic path for the reverse step, so sampled
// values agree bit for bit until the first parameter update.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "steplab/autodiff.hpp"
#include "steplab/diffusion.hpp"
#include "steplab/models.hpp"

namespace steplab::finetune {

enum class StrategyKind { EasyTune, EasyTuneChain, FullBackprop, DraftK, DrTune, Refl };

const char* strategy_name(StrategyKind kind);
/// Accepts both the CLI spellings (easytune-chain, full, draft-k) and the
/// underscore forms.
StrategyKind parse_strategy(const std::string& s);

enum class WeightingKind { Uniform, LastK, FirstK, LinearIncreasing, LinearDecreasing };

struct StepWeighting {
  WeightingKind kind = WeightingKind::Uniform;
  int k = 0;
};

/// Parses "uniform", "last_k:20", "first_k:20", "linear_increasing",
/// "linear_decreasing".
StepWeighting parse_weighting(const std::string& s);
std::string weighting_name(const StepWeighting& w);

/// Per-step reward weight w_t for t in 1..T.
double step_weight(int t, int steps, const StepWeighting& weighting);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::EasyTune;
  models::RewardMode reward_mode = models::RewardMode::NoiseAware;
  double kl_weight = 0.0;
  StepWeighting weighting;
  /// Fraction of steps that receive an update in the easytune variants; 1
  /// visits every step, smaller values draw a uniform subset per trajectory.
  double step_fraction = 1.0;
  /// Truncation window for draft_k.
  int draft_k = 1;
  /// Draw K uniformly from 1..T per update (AlignProp-style).
  bool randomized_k = false;
  bool stochastic_sampler = false;
};

/// Throws std::invalid_argument when the config is inconsistent for T steps.
void validate(const StrategyConfig& config, int steps);

/// Immutable copy of the pre-fine-tuning denoiser.
class FrozenReference {
 public:
  explicit FrozenReference(const models::DenoiserParams& theta) : model_(theta) {}
  const models::DenoiserParams& model() const noexcept { return model_; }
  /// Bound to tapes with requires_grad = false; never written.
  models::DenoiserParams& for_binding() const noexcept { return model_; }

 private:
  mutable models::DenoiserParams model_;
};

/// Trajectories processed by one update: one (condition, seed) per sample.
struct Batch {
  std::vector<int> conditions;
  std::vector<std::uint64_t> seeds;

  std::size_t size() const noexcept { return conditions.size(); }
};

struct UpdateRecord {
  std::size_t iteration = 0;
  StrategyKind strategy = StrategyKind::EasyTune;
  /// One entry per optimizer update inside this iteration.
  std::vector<int> steps;
  std::vector<double> step_rewards;
  std::vector<double> step_losses;
  std::vector<double> step_grad_norms;
  double loss = 0.0;
  double grad_norm = 0.0;
  /// Mean R(x_0, 0, c) over the batch, for every strategy.
  double final_reward = 0.0;
  ad::GraphStats graph;
  double millis = 0.0;
  std::size_t updates = 0;
  std::size_t skipped = 0;
  /// K for draft_k, sampled t for refl, 0 otherwise.
  int window = 0;
  /// Per trajectory x_T..x_0 when requested.
  std::vector<std::vector<Tensor>> states;
};

struct UpdateContext {
  models::DenoiserParams& theta;
  models::RewardParams& phi;
  const diffusion::NoiseSchedule& schedule;
  const StrategyConfig& config;
  models::Adam& optimizer;
  const FrozenReference* reference = nullptr;
  bool record_states = false;
  std::size_t iteration = 0;
};

UpdateRecord easytune_update(UpdateContext& ctx, const Batch& batch);
UpdateRecord easytune_chain_update(UpdateContext& ctx, const Batch& batch);
UpdateRecord full_backprop_update(UpdateContext& ctx, const Batch& batch);
UpdateRecord draft_k_update(UpdateContext& ctx, const Batch& batch);
UpdateRecord drtune_update(UpdateContext& ctx, const Batch& batch);
UpdateRecord refl_update(UpdateContext& ctx, const Batch& batch);

/// Dispatches on ctx.config.kind.
UpdateRecord run_update(UpdateContext& ctx, const Batch& batch);

// ---------------------------------------------------------------------------
// Loss builders. These are the differentiable pieces of the updates above,
// exposed so oracles and finite-difference checks can rebuild them.

/// kl_weight * ||pi_theta(x) - pi_ref(x)||^2 / 2 on the same detached input.
ad::Value kl_augment(ad::Tape& tape, ad::Value loss, ad::Value x_prev, ad::Value x_prev_ref, double kl_weight);

struct StepLoss {
  ad::Value loss;
  ad::Value reward;
  ad::Value x_prev;
};

/// One easytune step from a detached state x_t:
///   noise_aware: -w_t * R(pi(sg x_t), t - 1, c)
///   one_step:    -w_t * R(x0_hat(sg x_t), 0, c)
/// plus the KL penalty when configured.
StepLoss easytune_step_loss(ad::Tape& tape, models::DenoiserParams& theta, models::RewardParams& phi,
                            ad::Value x_t, int t, int condition, const diffusion::NoiseSchedule& schedule,
                            const StrategyConfig& config, const FrozenReference* reference = nullptr,
                            const std::optional<Tensor>& noise = std::nullopt);

struct TrajectoryLoss {
  ad::Value loss;
  std::vector<Tensor> states;
  int window = 0;
};

/// Builds the differentiable loss of the trajectory-level strategies
/// (full_backprop, draft_k, drtune, refl) for one trajectory from its seed.
/// Detached prefixes are rolled on the same tape with a release after every
/// step, so the tape must hold no other records when this is called.
TrajectoryLoss trajectory_loss(ad::Tape& tape, models::DenoiserParams& theta, models::RewardParams& phi,
                               int condition, std::uint64_t seed, const diffusion::NoiseSchedule& schedule,
                               const StrategyConfig& config, const FrozenReference* reference = nullptr);

/// Window actually used by draft_k / refl for a given seed.
int draw_window(const StrategyConfig& config, int steps, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Logging

/// Append-only CSV of UpdateRecords, one row per optimizer update. The reward
/// column is always the batch mean R(x_0, 0, c).
class UpdateLog {
 public:
  static constexpr const char* kHeader =
      "iter,strategy,t,reward,loss,grad_norm,retained_nodes,retained_elements,millis";

  explicit UpdateLog(std::ostream& os, bool write_header = true);
  void append(const UpdateRecord& rec);

 private:
  std::ostream& os_;
  std::size_t row_ = 0;
};

}  // namespace steplab::finetune
