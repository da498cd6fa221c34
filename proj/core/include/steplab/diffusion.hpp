// SPDX-License-Identifier: Apache-2.0
//
// Noise schedules, forward noising and the deterministic reverse step
//   x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps(x_t, t, c)) / sqrt(alpha_t)
// in attached, fully detached and eps-only-detached forms.
//
// Timesteps are 1-based (t in 1..T); states are 0-based with x_0 clean.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "steplab/autodiff.hpp"
#include "steplab/tensor.hpp"

namespace steplab::diffusion {

class NoiseSchedule {
 public:
  /// Builds a schedule from explicit betas, each in (0, 1).
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const noexcept { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_.at(index(t)); }
  double alpha(int t) const { return alpha_.at(index(t)); }
  /// alpha_bar(0) is 1 by convention.
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_.at(index(t)); }

  const std::vector<double>& betas() const noexcept { return beta_; }
  const std::vector<double>& alphas() const noexcept { return alpha_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

 private:
  std::size_t index(int t) const;

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

/// Linear beta schedule inclusive of both endpoints.
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

inline constexpr int kDefaultSteps = 50;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;

/// Coefficients of one reverse step, decoupled from a schedule so limits and
/// hand-picked values can be exercised directly.
struct StepCoefficients {
  double alpha = 1.0;
  double beta = 0.0;
  double alpha_bar = 1.0;

  static StepCoefficients at(const NoiseSchedule& s, int t) { return {s.alpha(t), s.beta(t), s.alpha_bar(t)}; }
};

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps.
Tensor forward_noise(const Tensor& x0, double alpha_bar, const Tensor& eps);
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// Noise predictor eps(x, t) for a fixed condition.
using EpsFn = std::function<ad::Value(ad::Tape&, ad::Value x, int t)>;

/// Which inputs of the reverse step are cut from the graph.
enum class Detach {
  None,     ///< pi(x_t): gradient through x_t and parameters
  Input,    ///< pi(sg(x_t)): gradient through parameters only
  EpsInput  ///< (x_t - c * eps(sg(x_t))) / sqrt(alpha): recurrence kept, eps input cut
};

struct StepResult {
  ad::Value x_prev;
  ad::Value eps;
  ad::Value x_in;  ///< the state as seen by the denoiser (detached where requested)
};

/// Reverse-step arithmetic given an already computed noise prediction.
ad::Value denoise_with_eps(ad::Tape& tape, ad::Value x_t, ad::Value eps, const StepCoefficients& k);
/// (x_t - sqrt(1 - alpha_bar) * eps) / sqrt(alpha_bar).
ad::Value predict_x0_with_eps(ad::Tape& tape, ad::Value x_t, ad::Value eps, const StepCoefficients& k);

StepResult reverse_step_ex(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn,
                           const NoiseSchedule& schedule, Detach detach,
                           const std::optional<Tensor>& noise = std::nullopt);

ad::Value reverse_step(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn, const NoiseSchedule& schedule);
ad::Value reverse_step_sg(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn,
                          const NoiseSchedule& schedule);
ad::Value one_step_predict(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn,
                           const NoiseSchedule& schedule);

enum class Retention { Full, Stepwise };

struct Trajectory {
  /// states[0] = x_T, ..., states[T] = x_0.
  std::vector<Tensor> states;
  int condition = 0;
  Retention retention = Retention::Full;
  /// Handle to x_0 on the sampling tape. With per-step release this is a
  /// detached leaf holding x_0.
  ad::Value final_state;

  const Tensor& x0() const { return states.back(); }
  const Tensor& state(int t) const { return states.at(states.size() - 1 - static_cast<std::size_t>(t)); }
};

struct SampleOptions {
  /// Adds sqrt(beta_t) * z for t > 1 (ancestral form). Off by default.
  bool stochastic = false;
  /// In stepwise retention, release the tape after every step.
  bool release_each_step = false;
};

/// x_T ~ N(0, I) drawn from `seed`.
Tensor initial_noise(const Shape& shape, std::uint64_t seed);

Trajectory sample_trajectory(ad::Tape& tape, const EpsFn& eps_fn, int condition, const Shape& shape,
                             const NoiseSchedule& schedule, Retention retention, std::uint64_t seed,
                             const SampleOptions& options = {});

}  // namespace steplab::diffusion
