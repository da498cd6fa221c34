// SPDX-License-Identifier: Apache-2.0
#include "steplab/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "steplab/rng.hpp"

namespace steplab::models {

namespace {

Tensor uniform_init(const Shape& shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(shape);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

void add_linear(ad::ParamSet& ps, const std::string& prefix, std::size_t out, std::size_t in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  ps.add(prefix + "w", uniform_init({out, in}, bound, rng));
  ps.add(prefix + "b", uniform_init({out}, bound, rng));
}

ad::Value linear(ad::Tape& tape, ad::ParamSet& ps, const std::string& prefix, ad::Value x, bool rg) {
  return tape.add(tape.matvec(tape.parameter(ps.get(prefix + "w"), rg), x), tape.parameter(ps.get(prefix + "b"), rg));
}

void check_condition(int condition, std::size_t count) {
  if (condition < 0 || static_cast<std::size_t>(condition) >= count) {
    throw std::out_of_range("unknown condition id " + std::to_string(condition));
  }
}

}  // namespace

Tensor time_embedding(int t, std::size_t dim) {
  Tensor e({dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(1000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[2 * i] = std::sin(t * freq);
    e[2 * i + 1] = std::cos(t * freq);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Denoiser

DenoiserParams init_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
  if (config.motion_dim == 0 || config.hidden == 0 || config.time_dim == 0 || config.cond_dim == 0 ||
      config.num_conditions == 0) {
    throw std::invalid_argument("denoiser dimensions must be >= 1");
  }
  Rng rng(derive_seed(seed, "denoiser"));
  DenoiserParams model{config, {}};
  auto& ps = model.params;
  ps.add("cond_embed", uniform_init({config.num_conditions, config.cond_dim}, 1.0, rng));
  add_linear(ps, "l1_", config.hidden, config.motion_dim + config.time_dim + config.cond_dim, rng);
  add_linear(ps, "l2_", config.hidden, config.hidden, rng);
  add_linear(ps, "l3_", config.motion_dim, config.hidden, rng);
  return model;
}

ad::Value denoiser_forward(ad::Tape& tape, DenoiserParams& model, ad::Value x, int t, int condition,
                           bool requires_grad) {
  const auto& cfg = model.config;
  check_condition(condition, cfg.num_conditions);
  if (x.size() != cfg.motion_dim) {
    throw ShapeError("denoiser input has " + std::to_string(x.size()) + " elements, expected " +
                     std::to_string(cfg.motion_dim));
  }
  auto& ps = model.params;
  const ad::Value cond =
      tape.row(tape.parameter(ps.get("cond_embed"), requires_grad), static_cast<std::size_t>(condition));
  const ad::Value temb = tape.constant(time_embedding(t, cfg.time_dim));
  const ad::Value parts[] = {x, temb, cond};
  ad::Value h = tape.concat(parts);
  h = tape.tanh(linear(tape, ps, "l1_", h, requires_grad));
  h = tape.tanh(linear(tape, ps, "l2_", h, requires_grad));
  return linear(tape, ps, "l3_", h, requires_grad);
}

diffusion::EpsFn eps_fn(DenoiserParams& model, int condition, bool requires_grad) {
  return [&model, condition, requires_grad](ad::Tape& tape, ad::Value x, int t) {
    return denoiser_forward(tape, model, x, t, condition, requires_grad);
  };
}

// ---------------------------------------------------------------------------
// Reward

double RewardParams::tau() const { return std::exp(params.get("log_tau").value[0]); }

RewardParams init_reward(const RewardConfig& config, std::uint64_t seed) {
  if (config.motion_dim == 0 || config.hidden == 0 || config.time_dim == 0 || config.embed_dim == 0 ||
      config.num_conditions == 0) {
    throw std::invalid_argument("reward dimensions must be >= 1");
  }
  Rng rng(derive_seed(seed, "reward"));
  RewardParams phi{config, {}};
  auto& ps = phi.params;
  add_linear(ps, "m1_", config.hidden, config.motion_dim + config.time_dim, rng);
  add_linear(ps, "m2_", config.hidden, config.hidden, rng);
  add_linear(ps, "m3_", config.embed_dim, config.hidden, rng);
  ps.add("text_embed", uniform_init({config.num_conditions, config.embed_dim}, 1.0, rng));
  ps.add("log_tau", Tensor::scalar(0.0));
  return phi;
}

const char* reward_mode_name(RewardMode mode) {
  return mode == RewardMode::NoiseAware ? "noise_aware" : "one_step";
}

RewardMode parse_reward_mode(const std::string& s) {
  if (s == "noise_aware" || s == "noise-aware") return RewardMode::NoiseAware;
  if (s == "one_step" || s == "one-step") return RewardMode::OneStep;
  throw std::invalid_argument("unknown reward mode: " + s);
}

ad::Value motion_embedding(ad::Tape& tape, RewardParams& phi, ad::Value x, int t, bool trainable) {
  const auto& cfg = phi.config;
  if (x.size() != cfg.motion_dim) {
    throw ShapeError("reward input has " + std::to_string(x.size()) + " elements, expected " +
                     std::to_string(cfg.motion_dim));
  }
  auto& ps = phi.params;
  const ad::Value parts[] = {x, tape.constant(time_embedding(t, cfg.time_dim))};
  ad::Value h = tape.concat(parts);
  h = tape.tanh(linear(tape, ps, "m1_", h, trainable));
  h = tape.tanh(linear(tape, ps, "m2_", h, trainable));
  return tape.l2_normalize(linear(tape, ps, "m3_", h, trainable));
}

ad::Value text_embedding(ad::Tape& tape, RewardParams& phi, int condition, bool trainable) {
  check_condition(condition, phi.config.num_conditions);
  const ad::Value table = tape.parameter(phi.params.get("text_embed"), trainable);
  return tape.l2_normalize(tape.row(table, static_cast<std::size_t>(condition)));
}

ad::Value similarity(ad::Tape& tape, RewardParams& phi, ad::Value motion_emb, ad::Value text_emb, bool trainable) {
  const ad::Value tau = tape.exp(tape.parameter(phi.params.get("log_tau"), trainable));
  return tape.mul(tape.dot(motion_emb, text_emb), tau);
}

ad::Value reward(ad::Tape& tape, RewardParams& phi, ad::Value x, int t, int condition, bool trainable) {
  check_condition(condition, phi.config.num_conditions);
  const ad::Value m = motion_embedding(tape, phi, x, t, trainable);
  const ad::Value c = text_embedding(tape, phi, condition, trainable);
  return similarity(tape, phi, m, c, trainable);
}

ad::Value reward_one_step(ad::Tape& tape, RewardParams& phi, ad::Value x_t, int t, int condition,
                          const diffusion::EpsFn& eps_fn, const diffusion::NoiseSchedule& schedule,
                          bool trainable) {
  const ad::Value x0_hat = diffusion::one_step_predict(tape, x_t, t, eps_fn, schedule);
  return reward(tape, phi, x0_hat, 0, condition, trainable);
}

double clean_reward(RewardParams& phi, const Tensor& x0, int condition) {
  ad::Tape tape;
  return reward(tape, phi, tape.constant(x0), 0, condition, false).item();
}

// ---------------------------------------------------------------------------
// Optimizer

double LrSchedule::at(std::size_t k) const {
  if (decay == LrDecay::Constant) return base;
  return base / static_cast<double>(k / std::max<std::size_t>(period, 1) + 1);
}

Adam::Adam(const ad::ParamSet& layout, AdamConfig config) : config_(config) {
  for (const auto& p : layout) {
    m_.push_back(Tensor::zeros_like(p.value));
    v_.push_back(Tensor::zeros_like(p.value));
  }
}

bool Adam::step(ad::ParamSet& params, const ad::ParamSet& grads) {
  bool ok = params.size() == m_.size() && params.same_layout(grads);
  for (std::size_t i = 0; ok && i < params.size(); ++i) ok = params.at(i).value.shape() == m_[i].shape();
  if (!ok) throw std::invalid_argument("Adam::step: parameter layout does not match optimizer state");
  if (!grads.grads_finite()) {
    ++skipped_;
    return false;
  }
  const double lr = config_.lr.at(steps_);
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params.at(i).value;
    const auto& g = grads.at(i).grad;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < value.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      value[k] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  return true;
}

}  // namespace steplab::models
