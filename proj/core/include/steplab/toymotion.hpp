// SPDX-License-Identifier: Apache-2.0
//
// Synthetic conditioned motion data and the two pretraining loops.
//
// Class c draws frames
//   frame_i = r_c * (cos(w_c * i + phi), sin(w_c * i + phi)) + jitter
// with (r_c, w_c) on a fixed grid and a per-sample phase phi. For d > 2 the
// extra channel pairs carry harmonics k * w_c with amplitude r_c / k.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "steplab/diffusion.hpp"
#include "steplab/models.hpp"
#include "steplab/motion.hpp"
#include "steplab/spl.hpp"

namespace steplab::toymotion {

struct DatasetConfig {
  std::size_t num_classes = 8;
  std::size_t per_class = 256;
  std::size_t frames = 16;
  std::size_t dims = 2;
  double noise_scale = 0.05;
  std::uint64_t seed = 0;
  /// Make the last class a near copy of the one before it (frequency offset
  /// by `hard_negative_gap`).
  bool hard_negative = false;
  double hard_negative_gap = 0.02;
};

struct ClassParams {
  double radius = 1.0;
  double omega = 0.5;
};

std::vector<ClassParams> class_grid(const DatasetConfig& config);

/// Noiseless raw (unstandardized) motion for a class and phase, flat L * d.
Tensor class_motion(const ClassParams& cls, std::size_t frames, std::size_t dims, double phase);

/// Per-channel affine standardization fitted on the train split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  Tensor apply(const Tensor& raw) const;
  Tensor invert(const Tensor& standardized) const;
};

enum class Split { Train, Val, Test };
const char* split_name(Split s);

struct ToyDataset {
  DatasetConfig config;
  std::vector<ClassParams> classes;
  Standardizer standardizer;
  /// Standardized samples.
  std::vector<MotionSample> train;
  std::vector<MotionSample> val;
  std::vector<MotionSample> test;

  std::size_t motion_dim() const noexcept { return config.frames * config.dims; }
  const std::vector<MotionSample>& split(Split s) const;
};

ToyDataset generate_dataset(const DatasetConfig& config);

/// Writes `dataset.tsv` (sample_id, split, class, L*d values) and
/// `manifest.json` (generator parameters, class grid, standardization).
void save_dataset(const std::filesystem::path& dir, const ToyDataset& ds);
ToyDataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Pretraining

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DiffusionPretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Mean noise-prediction MSE of one batch on the tape.
ad::Value noise_prediction_loss(ad::Tape& tape, models::DenoiserParams& theta, std::span<const MotionSample> batch,
                                std::span<const int> timesteps, std::span<const Tensor> noise,
                                const diffusion::NoiseSchedule& schedule);

/// Minimizes E ||eps - eps_theta(x_t, t, c)||^2; returns the per-step loss.
std::vector<double> pretrain_diffusion(models::DenoiserParams& theta, const ToyDataset& ds,
                                       const diffusion::NoiseSchedule& schedule,
                                       const DiffusionPretrainConfig& config);

/// Loss of the current model on a fixed evaluation draw (seeded).
double diffusion_eval_loss(models::DenoiserParams& theta, const ToyDataset& ds,
                           const diffusion::NoiseSchedule& schedule, std::size_t samples, std::uint64_t seed);

struct RetrievalPretrainConfig {
  std::size_t steps = 1500;
  /// Distinct classes per contrastive batch; capped at the class count.
  std::size_t batch = 8;
  double lr = 1e-3;
  /// Probability that a batch is noised at a random t (noise-aware reward).
  double noisy_fraction = 0.5;
  /// Evaluate R@k every this many steps (0 only at the end).
  std::size_t eval_every = 0;
  spl::EvalConfig eval;
  std::uint64_t seed = 0;
};

struct RetrievalTracePoint {
  std::size_t step = 0;
  double loss = 0.0;
  spl::RetrievalScores val;
};

std::vector<RetrievalTracePoint> pretrain_retrieval(models::RewardParams& phi, const ToyDataset& ds,
                                                    const diffusion::NoiseSchedule& schedule,
                                                    const RetrievalPretrainConfig& config);

}  // namespace steplab::toymotion
