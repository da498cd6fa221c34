// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "steplab/checkpoint.hpp"

namespace cli = steplab::cli;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kStrategies{"easytune", "easytune-chain", "easytune_chain", "full",  "full_backprop",
                                           "draft-k",  "draft_k",        "drtune",         "refl"};

void add_schedule(CLI::App* sub, cli::ScheduleOptions& s) {
  sub->add_option("--T", s.steps, "Diffusion steps")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--beta-start", s.beta_start, "First beta of the linear schedule")->capture_default_str();
  sub->add_option("--beta-end", s.beta_end, "Last beta of the linear schedule")->capture_default_str();
}

void add_finetune_options(CLI::App* sub, cli::FinetuneConfig& f, bool with_strategy) {
  sub->add_option("--denoiser", f.denoiser, "Pretrained denoiser checkpoint")->required();
  sub->add_option("--reward", f.reward, "Reward checkpoint")->required();
  add_schedule(sub, f.schedule);
  if (with_strategy) {
    sub->add_option("--strategy", f.strategy, "easytune, easytune-chain, full, draft-k, drtune or refl")
        ->check(CLI::IsMember(kStrategies))
        ->capture_default_str();
  }
  sub->add_option("--reward-mode", f.reward_mode, "noise_aware or one_step")
      ->check(CLI::IsMember({"noise_aware", "one_step", "noise-aware", "one-step"}))
      ->capture_default_str();
  sub->add_option("--step-weighting", f.step_weighting,
                  "uniform, last_k:N, first_k:N, linear_increasing or linear_decreasing")
      ->capture_default_str();
  sub->add_option("--kl-weight", f.kl_weight, "Weight of the KL penalty to the frozen model")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_option("--step-fraction", f.step_fraction, "Fraction of steps updated per trajectory (easytune)")
      ->capture_default_str();
  sub->add_option("--k", f.k, "Truncation window K for draft-k")->capture_default_str();
  sub->add_flag("--randomized-k", f.randomized_k, "Draw K uniformly from 1..T per update");
  sub->add_flag("--stochastic", f.stochastic, "Ancestral sampler instead of the deterministic mean path");
  sub->add_option("--iters", f.iterations, "Fine-tuning iterations")->capture_default_str();
  sub->add_option("--batch", f.batch, "Trajectories per iteration")->capture_default_str();
  sub->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
  sub->add_flag("--lr-inverse", f.lr_inverse, "eta_k = lr / (k + 1) per iteration");
  sub->add_option("--eval-every", f.eval_every, "Held-out reward every N iterations")->capture_default_str();
  sub->add_option("--heldout", f.heldout_per_condition, "Held-out trajectories per condition")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--seed", f.seed, "Root seed")->capture_default_str();
}

fs::path resolve_out(const fs::path& given, const char* command) {
  return given.empty() ? cli::default_output_root() / command : given;
}

/// Writes the effective option values next to the outputs so the run can be
/// repeated with --config.
void echo_config(const CLI::App& app, const CLI::App& sub, const fs::path& out) {
  std::ofstream os(out / "config.toml", std::ios::trunc);
  if (!os) throw cli::CommandError("cannot write " + (out / "config.toml").string());
  // keep only the executed subcommand's section
  const std::string prefix = sub.get_name() + ".";
  std::stringstream all(app.config_to_str(true, false));
  for (std::string line; std::getline(all, line);) {
    if (line.rfind(prefix, 0) == 0) os << line << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steplab: step-wise reward fine-tuning of a toy motion diffusion model"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML or INI file with option values; command-line flags take precedence");

  cli::GenDataConfig gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the toy motion dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory (default $STEPLAB_OUT/gen-data)");
  gen_cmd->add_option("--classes", gen.data.num_classes, "Motion classes")->capture_default_str();
  gen_cmd->add_option("--per-class", gen.data.per_class, "Samples per class")->capture_default_str();
  gen_cmd->add_option("--frames", gen.data.frames, "Frames per motion")->capture_default_str();
  gen_cmd->add_option("--dims", gen.data.dims, "Values per frame")->capture_default_str();
  gen_cmd->add_option("--noise", gen.data.noise_scale, "Per-frame jitter scale")->capture_default_str();
  gen_cmd->add_flag("--hard-negative", gen.data.hard_negative, "Twin the last class with a near duplicate");
  gen_cmd->add_option("--hard-negative-gap", gen.data.hard_negative_gap, "Frequency gap of the twin class")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.data.seed, "Root seed")->capture_default_str();

  cli::PretrainConfig pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pretrain the denoiser on a dataset");
  pre_cmd->add_option("--data", pre.data, "Dataset directory")->required();
  pre_cmd->add_option("--out", pre.out, "Output directory (default $STEPLAB_OUT/pretrain)");
  add_schedule(pre_cmd, pre.schedule);
  pre_cmd->add_option("--hidden", pre.hidden, "Hidden width")->capture_default_str();
  pre_cmd->add_option("--steps", pre.steps, "Optimizer steps")->capture_default_str();
  pre_cmd->add_option("--batch", pre.batch, "Motions per step")->capture_default_str();
  pre_cmd->add_option("--lr", pre.lr, "Adam learning rate")->capture_default_str();
  pre_cmd->add_option("--seed", pre.seed, "Root seed")->capture_default_str();

  cli::TrainRewardConfig rew;
  auto* rew_cmd = app.add_subcommand("train-reward", "Contrastive reward pretraining followed by SPL");
  rew_cmd->add_option("--data", rew.data, "Dataset directory")->required();
  rew_cmd->add_option("--out", rew.out, "Output directory (default $STEPLAB_OUT/train-reward)");
  add_schedule(rew_cmd, rew.schedule);
  rew_cmd->add_option("--hidden", rew.hidden, "Hidden width")->capture_default_str();
  rew_cmd->add_option("--steps", rew.steps, "Contrastive steps")->capture_default_str();
  rew_cmd->add_option("--batch", rew.batch, "Distinct conditions per contrastive batch")->capture_default_str();
  rew_cmd->add_option("--lr", rew.lr, "Contrastive learning rate")->capture_default_str();
  rew_cmd->add_option("--noisy-fraction", rew.noisy_fraction, "Share of batches noised at a random t")
      ->capture_default_str();
  rew_cmd->add_option("--spl-epochs", rew.spl_epochs, "SPL epochs (0 skips SPL)")->capture_default_str();
  rew_cmd->add_option("--k", rew.k, "Top-k of the retrieval check during SPL")->check(CLI::PositiveNumber)
      ->capture_default_str();
  rew_cmd->add_option("--spl-lr", rew.spl_lr, "SPL learning rate")->capture_default_str();
  rew_cmd->add_flag("--fallback,!--no-fallback", rew.fallback, "Contrastive step on retrieval successes")
      ->default_val(true);
  rew_cmd->add_option("--seed", rew.seed, "Root seed")->capture_default_str();

  cli::FinetuneConfig ft;
  auto* ft_cmd = app.add_subcommand("finetune", "Reward fine-tuning with a chosen strategy");
  ft_cmd->add_option("--out", ft.out, "Output directory (default $STEPLAB_OUT/finetune)");
  add_finetune_options(ft_cmd, ft, true);

  cli::AnalyzeConfig an;
  auto* an_cmd = app.add_subcommand("analyze", "Jacobian profile, memory sweep and descent trace of a run");
  an_cmd->add_option("--run", an.run, "Finetune run directory")->required();
  an_cmd->add_option("--out", an.out, "Output directory (default <run>/analysis)");
  an_cmd->add_option("--sweep-T", an.sweep_steps, "Schedule lengths of the memory sweep")->capture_default_str();
  an_cmd->add_option("--conditions", an.profile_conditions, "Conditions averaged in the Jacobian profile")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  cli::CompareConfig cmp;
  std::string strategies;
  auto* cmp_cmd = app.add_subcommand("compare", "Compare fine-tuning strategies on one base model");
  cmp_cmd->add_option("--runs", cmp.runs, "Existing finetune run directories");
  cmp_cmd->add_option("--strategies", strategies, "Comma-separated strategies to run from the shared base");
  cmp_cmd->add_option("--out", cmp.out, "Output directory (default $STEPLAB_OUT/compare)");
  cmp_cmd->add_option("--threshold", cmp.threshold_fraction,
                      "Threshold as a fraction of the reference run's reward improvement")
      ->capture_default_str();
  cmp_cmd->add_option("--jobs", cmp.jobs, "Concurrent fine-tuning runs")->check(CLI::PositiveNumber)
      ->capture_default_str();
  // the base options only matter with --strategies
  auto* base = cmp_cmd->add_option_group("base", "Fine-tuning options shared by --strategies runs");
  base->add_option("--denoiser", cmp.base.denoiser, "Pretrained denoiser checkpoint");
  base->add_option("--reward", cmp.base.reward, "Reward checkpoint");
  base->add_option("--T", cmp.base.schedule.steps, "Diffusion steps")->capture_default_str();
  base->add_option("--iters", cmp.base.iterations, "Fine-tuning iterations")->capture_default_str();
  base->add_option("--batch", cmp.base.batch, "Trajectories per iteration")->capture_default_str();
  base->add_option("--lr", cmp.base.lr, "Adam learning rate")->capture_default_str();
  base->add_option("--k", cmp.base.k, "Truncation window K for draft-k")->capture_default_str();
  base->add_option("--eval-every", cmp.base.eval_every, "Held-out reward every N iterations")->capture_default_str();
  base->add_option("--seed", cmp.base.seed, "Root seed shared by every run")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    fs::path out;
    const CLI::App* used = app.get_subcommands().front();
    if (*gen_cmd) {
      gen.out = out = resolve_out(gen.out, "gen-data");
      cli::cmd_gen_data(gen);
    } else if (*pre_cmd) {
      pre.out = out = resolve_out(pre.out, "pretrain");
      cli::cmd_pretrain(pre);
    } else if (*rew_cmd) {
      rew.out = out = resolve_out(rew.out, "train-reward");
      cli::cmd_train_reward(rew);
    } else if (*ft_cmd) {
      ft.out = out = resolve_out(ft.out, "finetune");
      cli::cmd_finetune(ft);
    } else if (*an_cmd) {
      an.out = out = an.out.empty() ? an.run / "analysis" : an.out;
      cli::cmd_analyze(an);
    } else if (*cmp_cmd) {
      cmp.out = out = resolve_out(cmp.out, "compare");
      std::stringstream ss(strategies);
      for (std::string s; std::getline(ss, s, ',');) {
        if (!s.empty()) cmp.strategies.push_back(s);
      }
      if (!cmp.strategies.empty() && (cmp.base.denoiser.empty() || cmp.base.reward.empty())) {
        throw cli::CommandError("--strategies needs --denoiser and --reward");
      }
      cli::cmd_compare(cmp);
    }
    echo_config(app, *used, out);
  } catch (const steplab::io::CheckpointError& e) {
    std::cerr << "steplab: checkpoint error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "steplab: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
