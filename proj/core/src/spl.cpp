// SPDX-License-Identifier: Apache-2.0
#include "steplab/spl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "steplab/rng.hpp"

namespace steplab::spl {

const char* pool_policy_name(PoolPolicy p) {
  switch (p) {
    case PoolPolicy::RandomBatch: return "random_batch";
    case PoolPolicy::FixedSubset: return "fixed_subset";
    case PoolPolicy::Full: return "full";
  }
  return "?";
}

PoolPolicy parse_pool_policy(const std::string& s) {
  if (s == "random_batch" || s == "random-batch" || s == "batch") return PoolPolicy::RandomBatch;
  if (s == "fixed_subset" || s == "fixed-subset" || s == "subset") return PoolPolicy::FixedSubset;
  if (s == "full") return PoolPolicy::Full;
  throw std::invalid_argument("unknown pool policy: " + s);
}

std::vector<double> score_pool(models::RewardParams& phi, const RetrievalPool& pool, ConditionId c) {
  std::vector<double> scores;
  scores.reserve(pool.size());
  ad::Tape tape;
  const Tensor e = models::text_embedding(tape, phi, c, false).data();
  const double tau = phi.tau();
  for (const auto* item : pool.items) {
    tape.release_graph();
    const ad::Value m = models::motion_embedding(tape, phi, tape.constant(item->frames), 0, false);
    double acc = 0.0;
    for (std::size_t k = 0; k < e.size(); ++k) acc += m.data()[k] * e[k];
    scores.push_back(tau * acc);
  }
  return scores;
}

std::vector<std::size_t> topk_from_scores(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw std::invalid_argument("top-k needs 1 <= k <= pool size (k=" + std::to_string(k) +
                                ", pool=" + std::to_string(scores.size()) + ")");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(k);
  return idx;
}

std::vector<std::size_t> retrieve_topk(const RetrievalPool& pool, ConditionId c, models::RewardParams& phi,
                                       std::size_t k) {
  if (pool.empty()) throw std::invalid_argument("empty retrieval pool");
  const auto scores = score_pool(phi, pool, c);
  return topk_from_scores(scores, k);
}

PreferencePair mine_pair_from_scores(std::size_t gt, const RetrievalPool& pool, std::span<const double> scores,
                                     std::size_t k) {
  if (gt >= pool.size()) throw std::out_of_range("ground truth index outside the pool");
  if (scores.size() != pool.size()) throw std::invalid_argument("one score per pool item required");
  const auto top = topk_from_scores(scores, k);
  const ConditionId c = pool.condition(gt);
  PreferencePair pair;
  pair.condition = c;
  pair.winner = pool.items[gt];
  const bool hit = std::any_of(top.begin(), top.end(), [&](std::size_t i) { return pool.condition(i) == c; });
  if (hit) {
    pair.loser = pair.winner;
    pair.identical = true;
  } else {
    pair.loser = pool.items[top.front()];
  }
  return pair;
}

PreferencePair mine_pair(std::size_t gt, ConditionId c, const RetrievalPool& pool, models::RewardParams& phi,
                         std::size_t k) {
  if (gt >= pool.size()) throw std::out_of_range("ground truth index outside the pool");
  if (pool.condition(gt) != c) throw std::invalid_argument("ground truth does not carry the query condition");
  const auto scores = score_pool(phi, pool, c);
  return mine_pair_from_scores(gt, pool, scores, k);
}

ad::Value preference_distribution(ad::Tape& tape, const PreferencePair& pair, models::RewardParams& phi,
                                  bool trainable) {
  const ad::Value rw = models::reward(tape, phi, tape.constant(pair.winner->frames), 0, pair.condition, trainable);
  const ad::Value rl = models::reward(tape, phi, tape.constant(pair.loser->frames), 0, pair.condition, trainable);
  const ad::Value parts[] = {rw, rl};
  return tape.softmax(tape.concat(parts));
}

PreferenceDistribution target_distribution(const PreferencePair& pair) {
  return pair.identical ? PreferenceDistribution{0.5, 0.5} : PreferenceDistribution{1.0, 0.0};
}

namespace {

double xlogx(double q) { return q > 0.0 ? q * std::log(q) : 0.0; }

}  // namespace

ad::Value spl_loss(ad::Tape& tape, const PreferenceDistribution& q, ad::Value p) {
  if (p.size() != 2) throw ShapeError("spl_loss expects a 2-element distribution");
  // KL(Q||P) = sum q log q - sum q log p; zero-mass entries drop out.
  const double entropy_term = xlogx(q.p_w) + xlogx(q.p_l);
  const ad::Value logp = tape.log(p);
  const ad::Value cross = tape.dot(tape.constant(Tensor::vector({q.p_w, q.p_l})), logp);
  return tape.sub(tape.constant(Tensor::scalar(entropy_term)), cross);
}

double kl_divergence(const PreferenceDistribution& q, const PreferenceDistribution& p) {
  auto term = [](double qi, double pi) { return qi > 0.0 ? qi * (std::log(qi) - std::log(pi)) : 0.0; };
  return term(q.p_w, p.p_w) + term(q.p_l, p.p_l);
}

bool check_pair_invariants(const PreferenceDistribution& p, const PreferenceDistribution& q,
                           SplInvariantStats& stats) {
  ++stats.pairs;
  const double ep = std::abs(p.p_w + p.p_l - 1.0);
  const double eq = std::abs(q.p_w + q.p_l - 1.0);
  stats.max_norm_error = std::max({stats.max_norm_error, ep, eq});
  bool ok = ep <= 1e-12 && eq <= 1e-12;
  ok = ok && p.p_w >= 0.0 && p.p_w <= 1.0 && p.p_l >= 0.0 && p.p_l <= 1.0;
  ok = ok && q.p_w >= 0.0 && q.p_w <= 1.0 && q.p_l >= 0.0 && q.p_l <= 1.0;
  const double kl = kl_divergence(q, p);
  const bool equal = p.p_w == q.p_w && p.p_l == q.p_l;
  ok = ok && kl >= 0.0 && (equal ? kl == 0.0 : kl > 0.0);
  if (!ok) ++stats.violations;
  return ok;
}

ad::Value contrastive_loss(ad::Tape& tape, models::RewardParams& phi, std::span<const Tensor> motions,
                           std::span<const ConditionId> conditions, std::span<const int> timesteps, bool trainable) {
  const std::size_t n = motions.size();
  if (n < 2) throw std::invalid_argument("contrastive loss needs a batch of at least 2");
  if (conditions.size() != n || timesteps.size() != n) {
    throw std::invalid_argument("contrastive loss: motions, conditions and timesteps differ in length");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (conditions[i] == conditions[j]) throw std::invalid_argument("contrastive batch repeats a condition");
    }
  }
  std::vector<ad::Value> m, e;
  for (std::size_t i = 0; i < n; ++i) {
    m.push_back(models::motion_embedding(tape, phi, tape.constant(motions[i]), timesteps[i], trainable));
    e.push_back(models::text_embedding(tape, phi, conditions[i], trainable));
  }
  const ad::Value tau = tape.exp(tape.parameter(phi.params.get("log_tau"), trainable));
  std::vector<std::vector<ad::Value>> sim(n, std::vector<ad::Value>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) sim[i][j] = tape.dot(m[i], e[j]);
  }
  auto ce = [&](const std::vector<ad::Value>& logits, std::size_t target) {
    const ad::Value p = tape.softmax(tape.mul(tape.concat(logits), tau));
    Tensor onehot({n});
    onehot[target] = 1.0;
    return tape.neg(tape.dot(tape.log(p), tape.constant(std::move(onehot))));
  };
  ad::Value total;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<ad::Value> col(n);
    for (std::size_t j = 0; j < n; ++j) col[j] = sim[j][i];
    const ad::Value both = tape.add(ce(sim[i], i), ce(col, i));
    total = total.valid() ? tape.add(total, both) : both;
  }
  return tape.scale(total, 0.5 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Evaluation

RetrievalScores eval_retrieval_scores(const PairScore& score, std::span<const ConditionId> conditions,
                                      const EvalConfig& config) {
  const std::size_t n = conditions.size();
  if (n == 0) throw std::invalid_argument("empty evaluation set");
  if (config.batch < 1 || config.batch > n) {
    throw std::invalid_argument("evaluation batch " + std::to_string(config.batch) + " exceeds set size " +
                                std::to_string(n));
  }
  if (config.max_k < 1 || config.max_k > config.batch) throw std::invalid_argument("max_k must be in [1, batch]");
  RetrievalScores out;
  out.text_to_motion.assign(config.max_k, 0.0);
  out.motion_to_text.assign(config.max_k, 0.0);
  Rng rng(derive_seed(config.seed, "eval_retrieval"));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::vector<double> s(config.batch);
  std::size_t queries = 0;
  for (std::size_t b = 0; b < std::max<std::size_t>(1, config.num_batches); ++b) {
    // partial Fisher-Yates for a batch without replacement
    for (std::size_t i = 0; i < config.batch; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(all[i], all[pick(rng)]);
    }
    const std::span<const std::size_t> batch(all.data(), config.batch);
    for (std::size_t q = 0; q < config.batch; ++q) {
      const ConditionId cq = conditions[batch[q]];
      for (int dir = 0; dir < 2; ++dir) {
        for (std::size_t j = 0; j < config.batch; ++j) {
          s[j] = dir == 0 ? score(batch[j], batch[q]) : score(batch[q], batch[j]);
        }
        const auto top = topk_from_scores(s, config.max_k);
        auto& r = dir == 0 ? out.text_to_motion : out.motion_to_text;
        bool hit = false;
        for (std::size_t k = 0; k < config.max_k; ++k) {
          hit = hit || conditions[batch[top[k]]] == cq;
          if (hit) r[k] += 1.0;
        }
      }
      ++queries;
    }
  }
  for (auto* r : {&out.text_to_motion, &out.motion_to_text}) {
    for (auto& v : *r) v /= static_cast<double>(queries);
  }
  return out;
}

RetrievalScores eval_retrieval(models::RewardParams& phi, std::span<const MotionSample> set,
                               const EvalConfig& config) {
  const std::size_t n = set.size();
  if (n == 0) throw std::invalid_argument("empty evaluation set");
  std::vector<Tensor> m;
  std::vector<Tensor> e(phi.config.num_conditions);
  std::vector<ConditionId> conds;
  m.reserve(n);
  {
    ad::Tape tape;
    for (const auto& s : set) {
      m.push_back(models::motion_embedding(tape, phi, tape.constant(s.frames), 0, false).data());
      conds.push_back(s.condition);
      tape.release_graph();
    }
    for (std::size_t c = 0; c < e.size(); ++c) {
      e[c] = models::text_embedding(tape, phi, static_cast<int>(c), false).data();
    }
  }
  const double tau = phi.tau();
  auto score = [&](std::size_t i, std::size_t j) {
    const Tensor& a = m[i];
    const Tensor& b = e[static_cast<std::size_t>(conds[j])];
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
    return tau * acc;
  };
  return eval_retrieval_scores(score, conds, config);
}

// ---------------------------------------------------------------------------
// Training

namespace {

void check_tau(const models::RewardParams& phi) {
  const double lt = phi.params.get("log_tau").value[0];
  if (!std::isfinite(lt) || std::abs(lt) > 10.0) {
    throw SplDivergence("temperature diverged: log_tau = " + std::to_string(lt) +
                        " (|log_tau| > 10); lower the learning rate");
  }
}

}  // namespace

SplResult spl_train(models::RewardParams& phi, std::span<const MotionSample> train,
                    std::span<const MotionSample> val, const SplConfig& config) {
  if (train.size() < 2) throw std::invalid_argument("SPL needs at least two training motions");
  const std::size_t pool_size = config.pool.policy == PoolPolicy::Full ? train.size()
                                                                       : std::min(config.pool.size, train.size());
  if (config.k < 1 || config.k > pool_size) throw std::invalid_argument("SPL k must be in [1, pool size]");

  models::Adam opt(phi.params, config.adam);
  Rng rng(derive_seed(config.seed, "spl"));

  std::vector<std::vector<std::size_t>> by_class(phi.config.num_conditions);
  for (std::size_t i = 0; i < train.size(); ++i) {
    by_class.at(static_cast<std::size_t>(train[i].condition)).push_back(i);
  }

  std::vector<std::size_t> fixed;
  if (config.pool.policy == PoolPolicy::FixedSubset) {
    std::vector<std::size_t> all(train.size());
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    fixed.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(pool_size));
  }

  auto build_pool = [&](std::size_t gt, RetrievalPool& pool) -> std::size_t {
    pool.items.clear();
    std::vector<std::size_t> idx;
    switch (config.pool.policy) {
      case PoolPolicy::Full:
        for (std::size_t i = 0; i < train.size(); ++i) pool.items.push_back(&train[i]);
        return gt;
      case PoolPolicy::FixedSubset:
        idx = fixed;
        if (std::find(idx.begin(), idx.end(), gt) == idx.end()) {
          idx[std::uniform_int_distribution<std::size_t>(0, idx.size() - 1)(rng)] = gt;
        }
        break;
      case PoolPolicy::RandomBatch: {
        idx.push_back(gt);
        while (idx.size() < pool_size) {
          const std::size_t j = std::uniform_int_distribution<std::size_t>(0, train.size() - 1)(rng);
          if (std::find(idx.begin(), idx.end(), j) == idx.end()) idx.push_back(j);
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        break;
      }
    }
    std::size_t pos = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      pool.items.push_back(&train[idx[i]]);
      if (idx[i] == gt) pos = i;
    }
    return pos;
  };

  auto contrastive_step = [&](std::size_t gt) {
    std::vector<ConditionId> classes;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      if (!by_class[c].empty() && static_cast<ConditionId>(c) != train[gt].condition) {
        classes.push_back(static_cast<ConditionId>(c));
      }
    }
    std::shuffle(classes.begin(), classes.end(), rng);
    const std::size_t b = std::min(config.contrastive_batch, classes.size() + 1);
    if (b < 2) return;
    std::vector<Tensor> motions{train[gt].frames};
    std::vector<ConditionId> conds{train[gt].condition};
    for (std::size_t i = 0; i + 1 < b; ++i) {
      const auto& members = by_class[static_cast<std::size_t>(classes[i])];
      const std::size_t j = members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)];
      motions.push_back(train[j].frames);
      conds.push_back(classes[i]);
    }
    const std::vector<int> ts(b, 0);
    ad::Tape tape;
    phi.params.zero_grad();
    tape.backward(contrastive_loss(tape, phi, motions, conds, ts, true));
    opt.step(phi.params);
  };

  SplResult result;
  RetrievalPool pool;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    if (config.queries_per_epoch > 0 && config.queries_per_epoch < order.size()) {
      order.resize(config.queries_per_epoch);
    }
    SplEpochMetrics m;
    m.epoch = epoch;
    double loss_acc = 0.0;
    for (std::size_t gt : order) {
      const std::size_t pos = build_pool(gt, pool);
      const ConditionId c = train[gt].condition;
      const auto scores = score_pool(phi, pool, c);
      const PreferencePair pair = mine_pair_from_scores(pos, pool, scores, config.k);
      ++m.queries;

      ad::Tape tape;
      const ad::Value p = preference_distribution(tape, pair, phi, true);
      const PreferenceDistribution q = target_distribution(pair);
      check_pair_invariants({p.data()[0], p.data()[1]}, q, result.invariants);

      if (!pair.identical) {
        ++m.failures;
        const ad::Value loss = spl_loss(tape, q, p);
        loss_acc += loss.item();
        phi.params.zero_grad();
        tape.backward(loss);
        opt.step(phi.params);
        ++result.spl_steps;
      } else if (config.fallback) {
        contrastive_step(gt);
        ++result.fallback_steps;
      }
      check_tau(phi);
    }
    m.failure_ratio = m.queries ? static_cast<double>(m.failures) / static_cast<double>(m.queries) : 0.0;
    m.mean_spl_loss = m.failures ? loss_acc / static_cast<double>(m.failures) : 0.0;
    if (!val.empty()) m.val = eval_retrieval(phi, val, config.eval);
    result.epochs.push_back(std::move(m));
  }
  return result;
}

}  // namespace steplab::spl
