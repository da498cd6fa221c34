// SPDX-License-Identifier: Apache-2.0
#include "steplab/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "steplab/rng.hpp"

namespace steplab::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  if (beta_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  double acc = 1.0;
  for (double b : beta_) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta must lie in (0, 1), got " + std::to_string(b));
    alpha_.push_back(1.0 - b);
    acc *= 1.0 - b;
    alpha_bar_.push_back(acc);
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  }
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule requires 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (steps == 1) {
    betas[0] = beta_start;
  } else {
    for (int i = 0; i < steps; ++i) {
      const double u = static_cast<double>(i) / static_cast<double>(steps - 1);
      betas[static_cast<std::size_t>(i)] = beta_start + u * (beta_end - beta_start);
    }
  }
  return NoiseSchedule(std::move(betas));
}

Tensor forward_noise(const Tensor& x0, double alpha_bar, const Tensor& eps) {
  if (x0.shape() != eps.shape()) throw ShapeError("forward_noise: x0 and eps shapes differ");
  const double a = std::sqrt(alpha_bar);
  const double s = std::sqrt(1.0 - alpha_bar);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * eps[i];
  return out;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw std::out_of_range("forward_noise: timestep out of range");
  return forward_noise(x0, schedule.alpha_bar(t), eps);
}

ad::Value denoise_with_eps(ad::Tape& tape, ad::Value x_t, ad::Value eps, const StepCoefficients& k) {
  if (!(k.alpha_bar < 1.0)) throw std::domain_error("degenerate schedule: alpha_bar_t = 1 in reverse step");
  const double coef = k.beta / std::sqrt(1.0 - k.alpha_bar);
  const double inv = 1.0 / std::sqrt(k.alpha);
  return tape.scale(tape.sub(x_t, tape.scale(eps, coef)), inv);
}

ad::Value predict_x0_with_eps(ad::Tape& tape, ad::Value x_t, ad::Value eps, const StepCoefficients& k) {
  const double s = std::sqrt(1.0 - k.alpha_bar);
  const double inv = 1.0 / std::sqrt(k.alpha_bar);
  return tape.scale(tape.sub(x_t, tape.scale(eps, s)), inv);
}

StepResult reverse_step_ex(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn,
                           const NoiseSchedule& schedule, Detach detach, const std::optional<Tensor>& noise) {
  const auto k = StepCoefficients::at(schedule, t);
  StepResult r;
  r.x_in = detach == Detach::None ? x_t : tape.stop_gradient(x_t);
  r.eps = eps_fn(tape, r.x_in, t);
  const ad::Value base = detach == Detach::EpsInput ? x_t : r.x_in;
  r.x_prev = denoise_with_eps(tape, base, r.eps, k);
  if (noise && t > 1) {
    Tensor z = *noise;
    for (auto& v : z.values()) v *= std::sqrt(k.beta);
    r.x_prev = tape.add(r.x_prev, tape.constant(std::move(z)));
  }
  return r;
}

ad::Value reverse_step(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn, const NoiseSchedule& schedule) {
  return reverse_step_ex(tape, x_t, t, eps_fn, schedule, Detach::None).x_prev;
}

ad::Value reverse_step_sg(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn,
                          const NoiseSchedule& schedule) {
  return reverse_step_ex(tape, x_t, t, eps_fn, schedule, Detach::Input).x_prev;
}

ad::Value one_step_predict(ad::Tape& tape, ad::Value x_t, int t, const EpsFn& eps_fn,
                           const NoiseSchedule& schedule) {
  const auto k = StepCoefficients::at(schedule, t);
  return predict_x0_with_eps(tape, x_t, eps_fn(tape, x_t, t), k);
}

Tensor initial_noise(const Shape& shape, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "x_T"));
  return standard_normal(shape, rng);
}

Trajectory sample_trajectory(ad::Tape& tape, const EpsFn& eps_fn, int condition, const Shape& shape,
                             const NoiseSchedule& schedule, Retention retention, std::uint64_t seed,
                             const SampleOptions& options) {
  Trajectory traj;
  traj.condition = condition;
  traj.retention = retention;
  traj.states.reserve(static_cast<std::size_t>(schedule.steps()) + 1);

  Rng noise_rng(derive_seed(seed, "ancestral"));
  traj.states.push_back(initial_noise(shape, seed));
  ad::Value x = tape.constant(traj.states.back());
  const Detach detach = retention == Retention::Full ? Detach::None : Detach::Input;

  for (int t = schedule.steps(); t >= 1; --t) {
    std::optional<Tensor> z;
    if (options.stochastic) z = standard_normal(shape, noise_rng);
    x = reverse_step_ex(tape, x, t, eps_fn, schedule, detach, z).x_prev;
    traj.states.push_back(x.data());
    if (retention == Retention::Stepwise && options.release_each_step) {
      tape.release_graph();
      x = tape.constant(traj.states.back());
    }
  }
  traj.final_state = x;
  return traj;
}

}  // namespace steplab::diffusion
