// SPDX-License-Identifier: Apache-2.0
// Shared helpers for the test binaries.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "steplab/diffusion.hpp"
#include "steplab/models.hpp"
#include "steplab/rng.hpp"

namespace steplab::testing {

inline models::DenoiserParams tiny_denoiser(std::size_t dim, std::uint64_t seed, std::size_t hidden = 8,
                                            std::size_t conditions = 3) {
  models::DenoiserConfig c;
  c.motion_dim = dim;
  c.hidden = hidden;
  c.time_dim = 4;
  c.cond_dim = 3;
  c.num_conditions = conditions;
  return models::init_denoiser(c, seed);
}

inline models::RewardParams tiny_reward(std::size_t dim, std::uint64_t seed, std::size_t hidden = 8,
                                        std::size_t conditions = 3) {
  models::RewardConfig c;
  c.motion_dim = dim;
  c.hidden = hidden;
  c.time_dim = 4;
  c.embed_dim = 4;
  c.num_conditions = conditions;
  auto phi = models::init_reward(c, seed);
  phi.params.get("log_tau").value[0] = 0.3;
  return phi;
}

/// Random short schedule with betas in [0.05, 0.3] so gradients through many
/// steps stay well scaled.
inline diffusion::NoiseSchedule random_schedule(int steps, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "test_schedule"));
  std::uniform_real_distribution<double> u(0.05, 0.3);
  std::vector<double> b(static_cast<std::size_t>(steps));
  for (auto& v : b) v = u(rng);
  return diffusion::NoiseSchedule(b);
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

inline std::vector<ad::Param*> param_ptrs(ad::ParamSet& ps) {
  std::vector<ad::Param*> out;
  for (auto& p : ps) out.push_back(&p);
  return out;
}

}  // namespace steplab::testing
