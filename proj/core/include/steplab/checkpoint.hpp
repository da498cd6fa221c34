// SPDX-License-Identifier: Apache-2.0
//
// Parameter checkpoints: a flat list of named f64 arrays with shapes.
//
// Binary layout (little-endian):
//   magic   8 bytes  "STLBCKPT"
//   version u32      currently 1
//   kind    str      u32 length + bytes ("denoiser", "reward", ...)
//   meta    str      u32 length + bytes (JSON model config)
//   count   u32
//   count x { name str, rank u32, dims u64[rank], values f64[prod(dims)] }
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "steplab/autodiff.hpp"
#include "steplab/models.hpp"

namespace steplab::io {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  std::string meta_json;
  ad::ParamSet params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_denoiser(const std::filesystem::path& path, const models::DenoiserParams& model);
models::DenoiserParams load_denoiser(const std::filesystem::path& path);
void save_reward(const std::filesystem::path& path, const models::RewardParams& phi);
models::RewardParams load_reward(const std::filesystem::path& path);

}  // namespace steplab::io
