// SPDX-License-Identifier: Apache-2.0
//
// Subcommand implementations behind the steplab tool. Each command reads its
// inputs, writes artifacts into `out`, and echoes its full configuration into
// out/manifest.json. Failures are thrown as CommandError.
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "steplab/finetune.hpp"
#include "steplab/spl.hpp"
#include "steplab/toymotion.hpp"

namespace steplab::cli {

namespace fs = std::filesystem;

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Version stamped into every manifest and shared by all CSV layouts below.
inline constexpr int kFormatVersion = 1;

struct ScheduleOptions {
  int steps = diffusion::kDefaultSteps;
  double beta_start = diffusion::kDefaultBetaStart;
  double beta_end = diffusion::kDefaultBetaEnd;

  diffusion::NoiseSchedule make() const { return diffusion::make_schedule(steps, beta_start, beta_end); }
};

struct GenDataConfig {
  fs::path out;
  toymotion::DatasetConfig data;
};

struct PretrainConfig {
  fs::path data;
  fs::path out;
  ScheduleOptions schedule;
  std::size_t hidden = 64;
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct TrainRewardConfig {
  fs::path data;
  fs::path out;
  ScheduleOptions schedule;
  std::size_t hidden = 64;
  std::size_t steps = 1500;
  std::size_t batch = 8;
  double lr = 1e-3;
  double noisy_fraction = 0.5;
  /// SPL stage after contrastive pretraining; 0 epochs skips it.
  std::size_t spl_epochs = 1;
  std::size_t k = 10;
  double spl_lr = 1e-4;
  bool fallback = true;
  std::uint64_t seed = 0;
};

struct FinetuneConfig {
  fs::path denoiser;
  fs::path reward;
  fs::path out;
  ScheduleOptions schedule;
  std::string strategy = "easytune";
  std::string reward_mode = "noise_aware";
  std::string step_weighting = "uniform";
  double kl_weight = 0.0;
  double step_fraction = 1.0;
  int k = 1;
  bool randomized_k = false;
  bool stochastic = false;
  std::size_t iterations = 200;
  std::size_t batch = 8;
  double lr = 1e-4;
  bool lr_inverse = false;
  /// Held-out reward every this many iterations (and before the first).
  std::size_t eval_every = 10;
  std::size_t heldout_per_condition = 4;
  std::uint64_t seed = 0;

  finetune::StrategyConfig strategy_config() const;
};

struct AnalyzeConfig {
  fs::path run;
  fs::path out;
  std::vector<int> sweep_steps{10, 25, 50};
  std::size_t profile_conditions = 8;
};

struct CompareConfig {
  /// Existing finetune run directories.
  std::vector<fs::path> runs;
  /// Strategies to fine-tune from `base`; runs land in out/<strategy>.
  std::vector<std::string> strategies;
  FinetuneConfig base;
  fs::path out;
  double threshold_fraction = 0.5;
  std::size_t jobs = 1;
};

void cmd_gen_data(const GenDataConfig& config);
void cmd_pretrain(const PretrainConfig& config);
void cmd_train_reward(const TrainRewardConfig& config);
void cmd_finetune(const FinetuneConfig& config);
void cmd_analyze(const AnalyzeConfig& config);
void cmd_compare(const CompareConfig& config);

/// Output root: $STEPLAB_OUT when set, else ./runs.
fs::path default_output_root();

/// Mean clean reward of `per_condition` trajectories per condition, drawn
/// from fixed seeds so every strategy of one run seed is judged on the same
/// noise.
double heldout_reward(models::DenoiserParams& theta, models::RewardParams& phi,
                      const diffusion::NoiseSchedule& schedule, std::size_t per_condition, std::uint64_t seed);

struct CompareRow {
  std::string run;
  std::string strategy;
  std::size_t iterations = 0;
  double baseline = 0.0;
  double final_reward = 0.0;
  std::size_t peak_nodes = 0;
  /// -1 when the threshold was never reached.
  long iters_to_threshold = -1;
  long optimizer_steps_to_threshold = -1;
  double ms_to_threshold = -1.0;
};

/// Reads a finetune run and fills everything but the threshold columns.
CompareRow load_run_summary(const fs::path& run);

}  // namespace steplab::cli
