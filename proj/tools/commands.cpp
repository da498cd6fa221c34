// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "steplab/checkpoint.hpp"
#include "steplab/instrument.hpp"
#include "steplab/rng.hpp"

namespace steplab::cli {

using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw CommandError("cannot create output directory " + dir.string());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw CommandError("cannot write " + path.string());
  return os;
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw CommandError(std::string("missing ") + what + ": " + path.string());
}

void write_manifest(const fs::path& out, const std::string& command, const json& config, const json& outputs) {
  const json m = {{"format", "steplab-run"},   {"version", kFormatVersion}, {"command", command},
                  {"config", config},          {"outputs", outputs}};
  auto os = open_out(out / "manifest.json");
  os << m.dump(2) << '\n';
  if (!os) throw CommandError("write failed for " + (out / "manifest.json").string());
}

json read_manifest(const fs::path& dir, const std::string& command) {
  const auto path = dir / "manifest.json";
  require_file(path, "run manifest");
  std::ifstream is(path);
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw CommandError(path.string() + ": " + e.what());
  }
  if (m.value("format", "") != "steplab-run" || m.value("version", 0) != kFormatVersion) {
    throw CommandError(path.string() + ": not a version " + std::to_string(kFormatVersion) + " steplab manifest");
  }
  if (m.value("command", "") != command) {
    throw CommandError(path.string() + ": expected a " + command + " run, found " + m.value("command", "?"));
  }
  return m;
}

json schedule_json(const ScheduleOptions& s) {
  return {{"steps", s.steps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

ScheduleOptions schedule_from(const json& j) {
  ScheduleOptions s;
  s.steps = j.at("steps");
  s.beta_start = j.at("beta_start");
  s.beta_end = j.at("beta_end");
  return s;
}

/// Minimal reader for the CSV files this tool writes: header plus numeric rows.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name, const fs::path& path) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw CommandError(path.string() + ": missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  }
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

Table read_table(const fs::path& path) {
  require_file(path, "table");
  std::ifstream is(path);
  Table t;
  std::string line;
  if (!std::getline(is, line)) throw CommandError(path.string() + ": empty file");
  t.header = split_csv(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split_csv(line));
    if (t.rows.back().size() != t.header.size()) throw CommandError(path.string() + ": ragged row");
  }
  return t;
}

double to_double(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

}  // namespace

fs::path default_output_root() {
  const char* env = std::getenv("STEPLAB_OUT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

double heldout_reward(models::DenoiserParams& theta, models::RewardParams& phi,
                      const diffusion::NoiseSchedule& schedule, std::size_t per_condition, std::uint64_t seed) {
  double acc = 0.0;
  std::size_t n = 0;
  const auto conditions = static_cast<int>(theta.config.num_conditions);
  for (int c = 0; c < conditions; ++c) {
    for (std::size_t j = 0; j < per_condition; ++j) {
      ad::Tape tape;
      const auto s = derive_seed(seed, "heldout", static_cast<std::uint64_t>(c) * 100003 + j);
      const auto tr = diffusion::sample_trajectory(tape, models::eps_fn(theta, c, false), c,
                                                   {theta.config.motion_dim}, schedule,
                                                   diffusion::Retention::Stepwise, s, {false, true});
      acc += models::clean_reward(phi, tr.x0(), c);
      ++n;
    }
  }
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const GenDataConfig& config) {
  ensure_dir(config.out);
  const auto ds = toymotion::generate_dataset(config.data);
  toymotion::save_dataset(config.out, ds);
  std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
            << " train/val/test motions to " << config.out.string() << '\n';
}

void cmd_pretrain(const PretrainConfig& config) {
  const auto ds = toymotion::load_dataset(config.data);
  ensure_dir(config.out);
  const auto schedule = config.schedule.make();
  models::DenoiserConfig dc;
  dc.motion_dim = ds.motion_dim();
  dc.num_conditions = ds.config.num_classes;
  dc.hidden = config.hidden;
  auto theta = models::init_denoiser(dc, derive_seed(config.seed, "init_denoiser"));
  const double before = toymotion::diffusion_eval_loss(theta, ds, schedule, 512, derive_seed(config.seed, "eval"));
  const auto trace = toymotion::pretrain_diffusion(
      theta, ds, schedule, {config.steps, config.batch, config.lr, derive_seed(config.seed, "pretrain")});
  const double after = toymotion::diffusion_eval_loss(theta, ds, schedule, 512, derive_seed(config.seed, "eval"));
  io::save_denoiser(config.out / "denoiser.ckpt", theta);
  {
    auto os = open_out(config.out / "pretrain.csv");
    os << "step,loss\n";
    for (std::size_t i = 0; i < trace.size(); ++i) os << i << ',' << num(trace[i]) << '\n';
  }
  const json cfg = {{"data", fs::absolute(config.data).string()},
                    {"schedule", schedule_json(config.schedule)},
                    {"hidden", config.hidden},
                    {"steps", config.steps},
                    {"batch", config.batch},
                    {"lr", config.lr},
                    {"seed", config.seed}};
  write_manifest(config.out, "pretrain", cfg,
                 {{"checkpoint", "denoiser.ckpt"},
                  {"metrics", "pretrain.csv"},
                  {"eval_loss_before", before},
                  {"eval_loss_after", after}});
  std::cout << "denoiser eval loss " << before << " -> " << after << '\n';
}

void cmd_train_reward(const TrainRewardConfig& config) {
  const auto ds = toymotion::load_dataset(config.data);
  ensure_dir(config.out);
  const auto schedule = config.schedule.make();
  models::RewardConfig rc;
  rc.motion_dim = ds.motion_dim();
  rc.num_conditions = ds.config.num_classes;
  rc.hidden = config.hidden;
  auto phi = models::init_reward(rc, derive_seed(config.seed, "init_reward"));

  spl::EvalConfig eval;
  eval.batch = std::min<std::size_t>(32, ds.val.size());
  eval.seed = derive_seed(config.seed, "eval");
  toymotion::RetrievalPretrainConfig pc;
  pc.steps = config.steps;
  pc.batch = config.batch;
  pc.lr = config.lr;
  pc.noisy_fraction = config.noisy_fraction;
  pc.eval_every = std::max<std::size_t>(1, config.steps / 10);
  pc.eval = eval;
  pc.seed = derive_seed(config.seed, "contrastive");
  const auto trace = toymotion::pretrain_retrieval(phi, ds, schedule, pc);
  {
    auto os = open_out(config.out / "retrieval.csv");
    os << "step,loss,r1,r2,r3\n";
    for (const auto& p : trace) {
      os << p.step << ',' << num(p.loss);
      for (std::size_t i = 0; i < 3; ++i) {
        os << ',' << (i < p.val.text_to_motion.size() ? num(p.val.text_to_motion[i]) : "");
      }
      os << '\n';
    }
  }

  json spl_summary = nullptr;
  if (config.spl_epochs > 0) {
    spl::SplConfig sc;
    sc.k = config.k;
    sc.epochs = config.spl_epochs;
    sc.adam.lr.base = config.spl_lr;
    sc.fallback = config.fallback;
    sc.eval = eval;
    sc.seed = derive_seed(config.seed, "spl");
    const double r1_before = spl::eval_retrieval(phi, ds.val, eval).text_to_motion[0];
    const auto res = spl::spl_train(phi, ds.train, ds.val, sc);
    auto os = open_out(config.out / "spl.csv");
    os << "epoch,queries,failures,failure_ratio,mean_spl_loss,r1\n";
    for (const auto& m : res.epochs) {
      os << m.epoch << ',' << m.queries << ',' << m.failures << ',' << num(m.failure_ratio) << ','
         << num(m.mean_spl_loss) << ',' << num(m.val.text_to_motion[0]) << '\n';
    }
    spl_summary = {{"r1_before", r1_before},
                   {"r1_after", res.epochs.back().val.text_to_motion[0]},
                   {"spl_steps", res.spl_steps},
                   {"fallback_steps", res.fallback_steps},
                   {"pairs", res.invariants.pairs},
                   {"invariant_violations", res.invariants.violations}};
    if (res.invariants.violations > 0) {
      throw CommandError("preference invariants violated on " + std::to_string(res.invariants.violations) + " pairs");
    }
  }
  io::save_reward(config.out / "reward.ckpt", phi);
  const json cfg = {{"data", fs::absolute(config.data).string()},
                    {"schedule", schedule_json(config.schedule)},
                    {"hidden", config.hidden},
                    {"steps", config.steps},
                    {"batch", config.batch},
                    {"lr", config.lr},
                    {"noisy_fraction", config.noisy_fraction},
                    {"spl_epochs", config.spl_epochs},
                    {"k", config.k},
                    {"spl_lr", config.spl_lr},
                    {"fallback", config.fallback},
                    {"seed", config.seed}};
  json outputs = {{"checkpoint", "reward.ckpt"}, {"metrics", "retrieval.csv"}, {"spl", spl_summary}};
  if (config.spl_epochs > 0) outputs["spl_metrics"] = "spl.csv";
  write_manifest(config.out, "train-reward", cfg, outputs);
  std::cout << "final val R@1 " << (spl_summary.is_null() ? trace.back().val.text_to_motion[0]
                                                          : spl_summary["r1_after"].get<double>())
            << '\n';
}

// ---------------------------------------------------------------------------

finetune::StrategyConfig FinetuneConfig::strategy_config() const {
  finetune::StrategyConfig c;
  c.kind = finetune::parse_strategy(strategy);
  c.reward_mode = models::parse_reward_mode(reward_mode);
  c.weighting = finetune::parse_weighting(step_weighting);
  c.kl_weight = kl_weight;
  c.step_fraction = step_fraction;
  c.draft_k = k;
  c.randomized_k = randomized_k;
  c.stochastic_sampler = stochastic;
  return c;
}

void cmd_finetune(const FinetuneConfig& config) {
  require_file(config.denoiser, "denoiser checkpoint");
  require_file(config.reward, "reward checkpoint");
  const auto strategy = config.strategy_config();
  const auto schedule = config.schedule.make();
  finetune::validate(strategy, schedule.steps());
  if (config.iterations == 0 || config.batch == 0) throw CommandError("iterations and batch must be positive");

  auto theta = io::load_denoiser(config.denoiser);
  auto phi = io::load_reward(config.reward);
  if (theta.config.motion_dim != phi.config.motion_dim || theta.config.num_conditions != phi.config.num_conditions) {
    throw io::CheckpointError("denoiser (dim " + std::to_string(theta.config.motion_dim) + ", " +
                              std::to_string(theta.config.num_conditions) + " conditions) and reward (dim " +
                              std::to_string(phi.config.motion_dim) + ", " +
                              std::to_string(phi.config.num_conditions) + " conditions) do not match");
  }
  ensure_dir(config.out);

  const finetune::FrozenReference reference(theta);
  const auto updates_per_iter = strategy.kind == finetune::StrategyKind::EasyTune ||
                                        strategy.kind == finetune::StrategyKind::EasyTuneChain
                                    ? static_cast<std::size_t>(schedule.steps())
                                    : std::size_t{1};
  // one eta_k per iteration, shared by the per-step updates inside it
  const models::LrSchedule lr{config.lr, config.lr_inverse ? models::LrDecay::Inverse : models::LrDecay::Constant,
                              updates_per_iter};
  models::Adam opt(theta.params, {lr});
  finetune::UpdateContext ctx{theta, phi, schedule, strategy, opt, &reference};

  auto updates_os = open_out(config.out / "updates.csv");
  finetune::UpdateLog log(updates_os);
  auto iter_os = open_out(config.out / "iterations.csv");
  iter_os << "iter,lr,loss,grad_norm,final_reward,optimizer_steps,skipped,peak_nodes,peak_elements,millis\n";
  auto held_os = open_out(config.out / "heldout.csv");
  held_os << "iter,optimizer_steps,millis,heldout_reward\n";

  const auto heldout_seed = derive_seed(config.seed, "heldout");
  const auto conditions = static_cast<int>(theta.config.num_conditions);
  double millis = 0.0;
  std::size_t steps_done = 0, peak_nodes = 0, skipped = 0;
  auto eval = [&](std::size_t iter) {
    const double r = heldout_reward(theta, phi, schedule, config.heldout_per_condition, heldout_seed);
    held_os << iter << ',' << steps_done << ',' << num(millis) << ',' << num(r) << '\n';
    return r;
  };
  const double baseline = eval(0);
  double last = baseline;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    finetune::Batch batch;
    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::size_t n = it * config.batch + b;
      batch.conditions.push_back(static_cast<int>(n % static_cast<std::size_t>(conditions)));
      batch.seeds.push_back(derive_seed(config.seed, "finetune", n));
    }
    ctx.iteration = it;
    const double eta = opt.current_lr();
    const auto rec = finetune::run_update(ctx, batch);
    log.append(rec);
    millis += rec.millis;
    steps_done += rec.updates;
    skipped += rec.skipped;
    peak_nodes = std::max(peak_nodes, rec.graph.peak_nodes);
    iter_os << it << ',' << num(eta) << ',' << num(rec.loss) << ',' << num(rec.grad_norm) << ','
            << num(rec.final_reward) << ',' << rec.updates << ',' << rec.skipped << ',' << rec.graph.peak_nodes
            << ',' << rec.graph.peak_elements << ',' << num(rec.millis) << '\n';
    if ((it + 1) % std::max<std::size_t>(1, config.eval_every) == 0 || it + 1 == config.iterations) {
      last = eval(it + 1);
    }
  }
  io::save_denoiser(config.out / "denoiser.ckpt", theta);
  if (!updates_os || !iter_os || !held_os) throw CommandError("write failed in " + config.out.string());

  const json cfg = {{"denoiser", fs::absolute(config.denoiser).string()},
                    {"reward", fs::absolute(config.reward).string()},
                    {"schedule", schedule_json(config.schedule)},
                    {"strategy", finetune::strategy_name(strategy.kind)},
                    {"reward_mode", models::reward_mode_name(strategy.reward_mode)},
                    {"step_weighting", finetune::weighting_name(strategy.weighting)},
                    {"kl_weight", config.kl_weight},
                    {"step_fraction", config.step_fraction},
                    {"k", config.k},
                    {"randomized_k", config.randomized_k},
                    {"stochastic", config.stochastic},
                    {"iterations", config.iterations},
                    {"batch", config.batch},
                    {"lr", config.lr},
                    {"lr_inverse", config.lr_inverse},
                    {"eval_every", config.eval_every},
                    {"heldout_per_condition", config.heldout_per_condition},
                    {"seed", config.seed}};
  write_manifest(config.out, "finetune", cfg,
                 {{"checkpoint", "denoiser.ckpt"},
                  {"updates", "updates.csv"},
                  {"iterations", "iterations.csv"},
                  {"heldout", "heldout.csv"},
                  {"baseline_reward", baseline},
                  {"final_reward", last},
                  {"optimizer_steps", steps_done},
                  {"skipped_updates", skipped},
                  {"peak_nodes", peak_nodes},
                  {"optimizer_millis", millis}});
  std::cout << finetune::strategy_name(strategy.kind) << ": held-out reward " << baseline << " -> " << last
            << ", peak nodes " << peak_nodes << '\n';
}

// ---------------------------------------------------------------------------

void cmd_analyze(const AnalyzeConfig& config) {
  const auto m = read_manifest(config.run, "finetune");
  const auto& cfg = m.at("config");
  const auto tuned_path = config.run / m.at("outputs").at("checkpoint").get<std::string>();
  const fs::path base_path = cfg.at("denoiser").get<std::string>();
  const fs::path reward_path = cfg.at("reward").get<std::string>();
  require_file(tuned_path, "fine-tuned checkpoint");
  require_file(base_path, "base denoiser checkpoint");
  require_file(reward_path, "reward checkpoint");
  const auto iterations = read_table(config.run / "iterations.csv");
  ensure_dir(config.out);

  auto tuned = io::load_denoiser(tuned_path);
  auto base = io::load_denoiser(base_path);
  auto phi = io::load_reward(reward_path);
  const auto sched_opts = schedule_from(cfg.at("schedule"));
  const auto schedule = sched_opts.make();

  // Jacobian profile averaged over conditions, before and after fine-tuning
  const std::size_t conds = std::min(config.profile_conditions, tuned.config.num_conditions);
  const auto T = static_cast<std::size_t>(schedule.steps());
  std::vector<double> sb(T, 0.0), cb(T, 0.0), st(T, 0.0), ct(T, 0.0);
  for (std::size_t c = 0; c < conds; ++c) {
    const auto seed = derive_seed(cfg.at("seed").get<std::uint64_t>(), "profile", c);
    const auto rb = instrument::jacobian_profile(base, static_cast<int>(c), schedule, seed);
    const auto rt = instrument::jacobian_profile(tuned, static_cast<int>(c), schedule, seed);
    for (std::size_t i = 0; i < T; ++i) {
      sb[i] += rb.step_norm[i] / static_cast<double>(conds);
      cb[i] += rb.cumulative_norm[i] / static_cast<double>(conds);
      st[i] += rt.step_norm[i] / static_cast<double>(conds);
      ct[i] += rt.cumulative_norm[i] / static_cast<double>(conds);
    }
  }
  {
    auto os = open_out(config.out / "jacobian_profile.csv");
    os << "t,step_norm_base,cumulative_norm_base,step_norm,cumulative_norm\n";
    for (std::size_t i = 0; i < T; ++i) {
      os << i + 1 << ',' << num(sb[i]) << ',' << num(cb[i]) << ',' << num(st[i]) << ',' << num(ct[i]) << '\n';
    }
  }

  // memory sweep of the run's strategy
  FinetuneConfig fc;
  fc.strategy = cfg.at("strategy");
  fc.reward_mode = cfg.at("reward_mode");
  fc.step_weighting = cfg.at("step_weighting");
  fc.kl_weight = cfg.at("kl_weight");
  fc.step_fraction = cfg.at("step_fraction");
  fc.k = cfg.at("k");
  fc.randomized_k = cfg.at("randomized_k");
  fc.stochastic = cfg.at("stochastic");
  auto strategy = fc.strategy_config();
  if (config.sweep_steps.empty()) throw CommandError("memory sweep needs at least one T");
  // K must fit the shortest swept schedule
  const int shortest = *std::min_element(config.sweep_steps.begin(), config.sweep_steps.end());
  strategy.draft_k = std::min(strategy.draft_k, shortest);
  instrument::MemorySweepConfig mc;
  mc.steps = config.sweep_steps;
  mc.strategies = {strategy};
  mc.beta_start = sched_opts.beta_start;
  mc.beta_end = sched_opts.beta_end;
  mc.seed = cfg.at("seed");
  const auto cells = instrument::memory_sweep(tuned, phi, mc);
  std::vector<double> xs, ys;
  {
    auto os = open_out(config.out / "memory_sweep.csv");
    os << "strategy,window,steps,peak_nodes,peak_elements\n";
    for (const auto& c : cells) {
      os << c.strategy << ',' << c.window << ',' << c.steps << ',' << c.peak_nodes << ',' << c.peak_elements << '\n';
      xs.push_back(c.steps);
      ys.push_back(static_cast<double>(c.peak_nodes));
    }
  }
  const bool constant = std::all_of(ys.begin(), ys.end(), [&](double y) { return y == ys.front(); });
  json fit_json = nullptr;
  if (xs.size() >= 2 && !constant) {
    const auto fit = instrument::fit_line(xs, ys);
    fit_json = {{"intercept", fit.intercept}, {"slope", fit.slope}, {"r2", fit.r2}};
  }

  // descent trace from the run's per-iteration log
  std::vector<instrument::DescentPoint> pts;
  const auto ci = iterations.col("iter", config.run / "iterations.csv");
  const auto cl = iterations.col("lr", config.run / "iterations.csv");
  const auto cv = iterations.col("loss", config.run / "iterations.csv");
  const auto cg = iterations.col("grad_norm", config.run / "iterations.csv");
  {
    auto os = open_out(config.out / "descent.csv");
    os << "iter,lr,loss,grad_norm\n";
    for (const auto& r : iterations.rows) {
      pts.push_back({static_cast<std::size_t>(to_double(r[ci])), to_double(r[cl]), to_double(r[cv]),
                     to_double(r[cg])});
      os << r[ci] << ',' << r[cl] << ',' << r[cv] << ',' << r[cg] << '\n';
    }
  }
  json descent = nullptr;
  if (pts.size() >= 4) {
    const auto v = instrument::judge_descent(pts, pts.size() / 4);
    descent = {{"first_loss", v.first_loss},         {"last_loss", v.last_loss},
               {"first_min_grad", v.first_min_grad}, {"last_min_grad", v.last_min_grad},
               {"loss_ok", v.loss_ok},               {"gradient_ok", v.gradient_ok}};
  }

  const json summary = {
      {"format", "steplab-analysis"},
      {"version", kFormatVersion},
      {"run", fs::absolute(config.run).string()},
      {"strategy", cfg.at("strategy")},
      {"jacobian", {{"cumulative_t1", ct.front()}, {"cumulative_tT_minus_1", T >= 2 ? ct[T - 2] : ct.front()},
                    {"cumulative_t1_base", cb.front()}, {"cumulative_tT_minus_1_base", T >= 2 ? cb[T - 2] : cb.front()}}},
      {"memory", {{"steps", config.sweep_steps}, {"peak_nodes", ys}, {"constant", constant}, {"fit", fit_json}}},
      {"descent", descent},
  };
  auto os = open_out(config.out / "analysis.json");
  os << summary.dump(2) << '\n';
  std::cout << "peak nodes over T";
  for (std::size_t i = 0; i < xs.size(); ++i) std::cout << ' ' << xs[i] << ':' << ys[i];
  std::cout << (constant ? " (constant)" : "") << '\n';
}

// ---------------------------------------------------------------------------

CompareRow load_run_summary(const fs::path& run) {
  const auto m = read_manifest(run, "finetune");
  CompareRow row;
  row.run = run.filename().string();
  if (row.run.empty()) row.run = run.parent_path().filename().string();
  row.strategy = m.at("config").at("strategy");
  row.iterations = m.at("config").at("iterations");
  row.baseline = m.at("outputs").at("baseline_reward");
  row.final_reward = m.at("outputs").at("final_reward");
  row.peak_nodes = m.at("outputs").at("peak_nodes");
  return row;
}

void cmd_compare(const CompareConfig& config) {
  if (config.runs.empty() && config.strategies.empty()) throw CommandError("compare needs --runs or --strategies");
  if (config.threshold_fraction <= 0.0 || config.threshold_fraction > 1.0) {
    throw CommandError("threshold fraction must lie in (0, 1]");
  }
  ensure_dir(config.out);
  std::vector<fs::path> runs = config.runs;
  if (!config.strategies.empty()) {
    for (const auto& s : config.strategies) finetune::parse_strategy(s);
    std::vector<std::future<void>> pending;
    for (const auto& s : config.strategies) {
      FinetuneConfig fc = config.base;
      fc.strategy = s;
      fc.out = config.out / finetune::strategy_name(finetune::parse_strategy(s));
      runs.push_back(fc.out);
      pending.push_back(std::async(config.jobs > 1 ? std::launch::async : std::launch::deferred,
                                   [fc] { cmd_finetune(fc); }));
      if (pending.size() >= std::max<std::size_t>(1, config.jobs)) {
        for (auto& f : pending) f.get();
        pending.clear();
      }
    }
    for (auto& f : pending) f.get();
  }

  std::vector<CompareRow> rows;
  std::vector<Table> curves;
  for (const auto& r : runs) {
    rows.push_back(load_run_summary(r));
    curves.push_back(read_table(r / "heldout.csv"));
  }
  // threshold: shared baseline + fraction of the reference improvement, the
  // reference being full_backprop when present and the best run otherwise
  const double baseline = rows.front().baseline;
  for (const auto& r : rows) {
    if (r.baseline != baseline) throw CommandError("runs do not share a baseline; compare needs one seed and base model");
  }
  std::size_t ref = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].final_reward > rows[ref].final_reward) ref = i;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].strategy == "full_backprop") {
      ref = i;
      break;
    }
  }
  const double threshold = baseline + config.threshold_fraction * (rows[ref].final_reward - baseline);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& t = curves[i];
    const fs::path p = runs[i] / "heldout.csv";
    const auto ci = t.col("iter", p), cs = t.col("optimizer_steps", p), cm = t.col("millis", p),
               cr = t.col("heldout_reward", p);
    for (const auto& r : t.rows) {
      if (std::stol(r[ci]) > 0 && to_double(r[cr]) >= threshold) {
        rows[i].iters_to_threshold = std::stol(r[ci]);
        rows[i].optimizer_steps_to_threshold = std::stol(r[cs]);
        rows[i].ms_to_threshold = to_double(r[cm]);
        break;
      }
    }
  }

  json table = json::array();
  {
    auto os = open_out(config.out / "comparison.csv");
    os << "run,strategy,iterations,baseline_reward,final_reward,peak_nodes,iters_to_threshold,"
          "optimizer_steps_to_threshold,ms_to_threshold\n";
    for (const auto& r : rows) {
      os << r.run << ',' << r.strategy << ',' << r.iterations << ',' << num(r.baseline) << ',' << num(r.final_reward)
         << ',' << r.peak_nodes << ',' << r.iters_to_threshold << ',' << r.optimizer_steps_to_threshold << ','
         << num(r.ms_to_threshold) << '\n';
      table.push_back({{"run", r.run},
                       {"strategy", r.strategy},
                       {"iterations", r.iterations},
                       {"baseline_reward", r.baseline},
                       {"final_reward", r.final_reward},
                       {"peak_nodes", r.peak_nodes},
                       {"iters_to_threshold", r.iters_to_threshold},
                       {"optimizer_steps_to_threshold", r.optimizer_steps_to_threshold},
                       {"ms_to_threshold", r.ms_to_threshold}});
    }
  }
  std::vector<std::string> run_paths;
  for (const auto& r : runs) run_paths.push_back(fs::absolute(r).string());
  const json doc = {{"format", "steplab-comparison"},
                    {"version", kFormatVersion},
                    {"runs", run_paths},
                    {"threshold_fraction", config.threshold_fraction},
                    {"reference", rows[ref].run},
                    {"threshold", threshold},
                    {"rows", table}};
  auto os = open_out(config.out / "comparison.json");
  os << doc.dump(2) << '\n';
  std::printf("%-16s %-14s %12s %12s %10s %10s\n", "run", "strategy", "final", "peak_nodes", "iters@thr", "ms@thr");
  for (const auto& r : rows) {
    std::printf("%-16s %-14s %12.5f %12zu %10ld %10.0f\n", r.run.c_str(), r.strategy.c_str(), r.final_reward,
                r.peak_nodes, r.iters_to_threshold, r.ms_to_threshold);
  }
}

}  // namespace steplab::cli
