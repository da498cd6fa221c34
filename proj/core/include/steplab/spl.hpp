// SPDX-License-Identifier: Apache-2.0
//
// Self-refinement preference learning for the reward model: retrieval,
// preference-pair mining from retrieval failures, the KL preference loss,
// the contrastive fallback objective, and R@k evaluation.
//
// A retrieved motion counts as the ground truth when it carries the query's
// condition id. Conditions are bare ids, so every motion of a class is a
// duplicate ground truth for that class's query.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "steplab/autodiff.hpp"
#include "steplab/models.hpp"
#include "steplab/motion.hpp"

namespace steplab::spl {

class SplDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PoolPolicy { RandomBatch, FixedSubset, Full };

const char* pool_policy_name(PoolPolicy p);
PoolPolicy parse_pool_policy(const std::string& s);

struct PoolConfig {
  PoolPolicy policy = PoolPolicy::RandomBatch;
  /// Pool size for RandomBatch and FixedSubset (the ground truth included).
  std::size_t size = 32;
};

/// Candidate motions for one retrieval query.
struct RetrievalPool {
  std::vector<const MotionSample*> items;

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }
  ConditionId condition(std::size_t i) const { return items.at(i)->condition; }
};

/// Rewards R(x, 0, c) of every pool item for condition c.
std::vector<double> score_pool(models::RewardParams& phi, const RetrievalPool& pool, ConditionId c);

/// Indices of the k largest scores, descending; ties go to the lower index.
std::vector<std::size_t> topk_from_scores(std::span<const double> scores, std::size_t k);

std::vector<std::size_t> retrieve_topk(const RetrievalPool& pool, ConditionId c, models::RewardParams& phi,
                                       std::size_t k);

struct PreferencePair {
  const MotionSample* winner = nullptr;
  const MotionSample* loser = nullptr;
  ConditionId condition = 0;
  bool identical = false;
};

/// Pair for ground truth `gt` (an index into the pool) given precomputed
/// scores. Retrieval succeeds when any top-k item shares the condition.
PreferencePair mine_pair_from_scores(std::size_t gt, const RetrievalPool& pool, std::span<const double> scores,
                                     std::size_t k);
PreferencePair mine_pair(std::size_t gt, ConditionId c, const RetrievalPool& pool, models::RewardParams& phi,
                         std::size_t k);

/// (p_w, p_l)
struct PreferenceDistribution {
  double p_w = 0.5;
  double p_l = 0.5;
};

/// Softmax over (R(x_w, 0, c), R(x_l, 0, c)) as a 2-vector on the tape.
ad::Value preference_distribution(ad::Tape& tape, const PreferencePair& pair, models::RewardParams& phi,
                                  bool trainable = true);
PreferenceDistribution target_distribution(const PreferencePair& pair);
/// KL(Q || P) with 0 log 0 = 0. `p` is a 2-vector Value.
ad::Value spl_loss(ad::Tape& tape, const PreferenceDistribution& q, ad::Value p);
/// Plain-number KL for invariant checks.
double kl_divergence(const PreferenceDistribution& q, const PreferenceDistribution& p);

/// Symmetric InfoNCE over a batch of (motion, condition) pairs with logits
/// R(x_i, t_i, c_j). Conditions must be pairwise distinct; batch >= 2.
ad::Value contrastive_loss(ad::Tape& tape, models::RewardParams& phi, std::span<const Tensor> motions,
                           std::span<const ConditionId> conditions, std::span<const int> timesteps,
                           bool trainable = true);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalConfig {
  std::size_t batch = 32;
  /// Random batches drawn (without replacement inside a batch).
  std::size_t num_batches = 200;
  std::size_t max_k = 3;
  std::uint64_t seed = 0;
};

struct RetrievalScores {
  /// r_at[k-1] = R@k, for k = 1..max_k.
  std::vector<double> text_to_motion;
  std::vector<double> motion_to_text;
};

/// score(i, j) = reward of motion i under the condition of item j.
using PairScore = std::function<double(std::size_t motion, std::size_t condition_of)>;

RetrievalScores eval_retrieval_scores(const PairScore& score, std::span<const ConditionId> conditions,
                                      const EvalConfig& config);
RetrievalScores eval_retrieval(models::RewardParams& phi, std::span<const MotionSample> set,
                               const EvalConfig& config);

// ---------------------------------------------------------------------------
// Training

struct SplConfig {
  std::size_t k = 10;
  std::size_t epochs = 1;
  PoolConfig pool;
  models::AdamConfig adam{{1e-4, models::LrDecay::Constant}};
  /// Distinct-condition batch size of the contrastive fallback step.
  std::size_t contrastive_batch = 8;
  /// Identical pairs take one contrastive step; off skips them.
  bool fallback = true;
  /// Queries per epoch; 0 uses every training sample once.
  std::size_t queries_per_epoch = 0;
  EvalConfig eval;
  std::uint64_t seed = 0;
};

struct SplEpochMetrics {
  std::size_t epoch = 0;
  std::size_t queries = 0;
  std::size_t failures = 0;
  double failure_ratio = 0.0;
  double mean_spl_loss = 0.0;
  RetrievalScores val;
};

struct SplInvariantStats {
  std::size_t pairs = 0;
  std::size_t violations = 0;
  double max_norm_error = 0.0;
};

struct SplResult {
  std::vector<SplEpochMetrics> epochs;
  SplInvariantStats invariants;
  std::size_t spl_steps = 0;
  std::size_t fallback_steps = 0;
};

/// Mines pairs against the configured pool, takes a preference step on every
/// failure and a contrastive step on every success. Throws SplDivergence when
/// |log_tau| exceeds 10.
SplResult spl_train(models::RewardParams& phi, std::span<const MotionSample> train,
                    std::span<const MotionSample> val, const SplConfig& config);

/// Checks P, Q normalization and KL(Q||P) == 0 iff P == Q on one pair.
bool check_pair_invariants(const PreferenceDistribution& p, const PreferenceDistribution& q,
                           SplInvariantStats& stats);

}  // namespace steplab::spl
