// SPDX-License-Identifier: Apache-2.0
//
// Toy networks: the noise predictor eps_theta and the dual-encoder reward
// R_phi(x, t, c) = tau * <E_M(x, t), E_T(c)> with unit-norm embeddings.
#pragma once

#include <cstddef>
#include <cstdint>

#include "steplab/autodiff.hpp"
#include "steplab/diffusion.hpp"

namespace steplab::models {

/// Sinusoidal embedding of an integer timestep.
Tensor time_embedding(int t, std::size_t dim);

struct DenoiserConfig {
  std::size_t motion_dim = 32;
  std::size_t hidden = 64;
  std::size_t time_dim = 16;
  std::size_t cond_dim = 16;
  std::size_t num_conditions = 8;
};

/// Two tanh hidden layers over [x, time embedding, condition embedding].
struct DenoiserParams {
  DenoiserConfig config;
  ad::ParamSet params;
};

DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed);

ad::Value denoiser_forward(ad::Tape& tape, DenoiserParams& model, ad::Value x, int t, int condition,
                           bool requires_grad = true);

/// Binds the model and a condition into a noise predictor for the sampler.
diffusion::EpsFn eps_fn(DenoiserParams& model, int condition, bool requires_grad = true);

struct RewardConfig {
  std::size_t motion_dim = 32;
  std::size_t hidden = 64;
  std::size_t time_dim = 16;
  std::size_t embed_dim = 16;
  std::size_t num_conditions = 8;
};

struct RewardParams {
  RewardConfig config;
  ad::ParamSet params;

  double tau() const;
};

RewardParams init_reward(const RewardConfig& config, std::uint64_t seed);

enum class RewardMode { NoiseAware, OneStep };

const char* reward_mode_name(RewardMode mode);
RewardMode parse_reward_mode(const std::string& s);

/// Unit-norm motion embedding E_M(x, t).
ad::Value motion_embedding(ad::Tape& tape, RewardParams& phi, ad::Value x, int t, bool trainable = false);
/// Unit-norm condition embedding E_T(c).
ad::Value text_embedding(ad::Tape& tape, RewardParams& phi, int condition, bool trainable = false);
/// tau * <motion_emb, text_emb>.
ad::Value similarity(ad::Tape& tape, RewardParams& phi, ad::Value motion_emb, ad::Value text_emb,
                     bool trainable = false);

/// Noise-aware reward R_phi(x_t, t, c).
ad::Value reward(ad::Tape& tape, RewardParams& phi, ad::Value x, int t, int condition, bool trainable = false);

/// One-step reward R_phi(x0_hat, 0, c), x0_hat predicted from x_t by eps_fn.
ad::Value reward_one_step(ad::Tape& tape, RewardParams& phi, ad::Value x_t, int t, int condition,
                          const diffusion::EpsFn& eps_fn, const diffusion::NoiseSchedule& schedule,
                          bool trainable = false);

/// Value-only reward of a clean motion.
double clean_reward(RewardParams& phi, const Tensor& x0, int condition);

// ---------------------------------------------------------------------------
// Optimizer

enum class LrDecay { Constant, Inverse };

struct LrSchedule {
  double base = 1e-3;
  LrDecay decay = LrDecay::Constant;
  /// Optimizer updates per schedule index, so the easytune variants' T inner updates can
  /// share one eta_k per trajectory.
  std::size_t period = 1;

  /// eta for the k-th optimizer update (k = 0 first): base, or
  /// base / (floor(k / period) + 1).
  double at(std::size_t k) const;
};

struct AdamConfig {
  LrSchedule lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are laid out like the parameter set given at
/// construction.
class Adam {
 public:
  Adam(const ad::ParamSet& layout, AdamConfig config);

  /// Applies one update to `params` from the gradients stored in `grads`.
  /// Returns false (and leaves params untouched) when any gradient is
  /// non-finite.
  bool step(ad::ParamSet& params, const ad::ParamSet& grads);
  bool step(ad::ParamSet& params) { return step(params, params); }

  std::size_t steps() const noexcept { return steps_; }
  std::size_t skipped() const noexcept { return skipped_; }
  double current_lr() const { return config_.lr.at(steps_); }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t steps_ = 0;
  std::size_t skipped_ = 0;
};

}  // namespace steplab::models
