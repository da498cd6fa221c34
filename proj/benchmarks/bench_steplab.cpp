// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "steplab/finetune.hpp"
#include "steplab/rng.hpp"

using namespace steplab;

namespace {

struct Toy {
  models::DenoiserParams theta = models::init_denoiser({}, 1);
  models::RewardParams phi = models::init_reward({}, 2);
};

void run_strategy(benchmark::State& state, finetune::StrategyKind kind) {
  Toy toy;
  const auto schedule = diffusion::make_schedule(static_cast<int>(state.range(0)), 1e-4, 0.02);
  finetune::StrategyConfig cfg;
  cfg.kind = kind;
  cfg.draft_k = static_cast<int>(state.range(1));
  if (kind == finetune::StrategyKind::Refl) cfg.reward_mode = models::RewardMode::OneStep;
  models::Adam opt(toy.theta.params, {{1e-4}});
  finetune::UpdateContext ctx{toy.theta, toy.phi, schedule, cfg, opt};
  std::size_t it = 0, peak = 0;
  for (auto _ : state) {
    ctx.iteration = it;
    const auto rec = finetune::run_update(ctx, {{static_cast<int>(it % 8)}, {it}});
    peak = std::max(peak, rec.graph.peak_nodes);
    ++it;
  }
  state.counters["peak_nodes"] = static_cast<double>(peak);
}

void BM_EasyTune(benchmark::State& s) { run_strategy(s, finetune::StrategyKind::EasyTune); }
void BM_FullBackprop(benchmark::State& s) { run_strategy(s, finetune::StrategyKind::FullBackprop); }
void BM_DraftK(benchmark::State& s) { run_strategy(s, finetune::StrategyKind::DraftK); }
void BM_DrTune(benchmark::State& s) { run_strategy(s, finetune::StrategyKind::DrTune); }
void BM_Refl(benchmark::State& s) { run_strategy(s, finetune::StrategyKind::Refl); }

BENCHMARK(BM_EasyTune)->Args({10, 1})->Args({25, 1})->Args({50, 1})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FullBackprop)->Args({10, 1})->Args({25, 1})->Args({50, 1})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DraftK)->Args({50, 1})->Args({50, 10})->Args({50, 50})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DrTune)->Args({50, 1})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Refl)->Args({50, 1})->Unit(benchmark::kMillisecond);

void BM_ReverseStep(benchmark::State& state) {
  Toy toy;
  const auto schedule = diffusion::make_schedule(50, 1e-4, 0.02);
  Rng rng(3);
  const auto x = standard_normal({32}, rng);
  ad::Tape tape;
  for (auto _ : state) {
    const auto y = diffusion::reverse_step(tape, tape.constant(x), 25, models::eps_fn(toy.theta, 0, false), schedule);
    benchmark::DoNotOptimize(y.data()[0]);
    tape.release_graph();
  }
}
BENCHMARK(BM_ReverseStep);

void BM_DenoiserBackward(benchmark::State& state) {
  Toy toy;
  Rng rng(4);
  const auto x = standard_normal({32}, rng);
  for (auto _ : state) {
    ad::Tape tape;
    const auto e = models::denoiser_forward(tape, toy.theta, tape.constant(x), 10, 3);
    tape.backward(tape.sum(e));
    toy.theta.params.zero_grad();
  }
}
BENCHMARK(BM_DenoiserBackward);

}  // namespace

BENCHMARK_MAIN();
