// SPDX-License-Identifier: Apache-2.0
#include "steplab/toymotion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "steplab/rng.hpp"

namespace steplab::toymotion {

std::vector<ClassParams> class_grid(const DatasetConfig& config) {
  std::vector<ClassParams> out;
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    out.push_back({c % 2 == 0 ? 0.6 : 1.2, 0.25 + 0.2 * static_cast<double>(c / 2)});
  }
  if (config.hard_negative && config.num_classes >= 2) {
    const auto& twin = out[config.num_classes - 2];
    out.back() = {twin.radius, twin.omega + config.hard_negative_gap};
  }
  return out;
}

Tensor class_motion(const ClassParams& cls, std::size_t frames, std::size_t dims, double phase) {
  Tensor m({frames * dims});
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::size_t j = 0; j < dims; ++j) {
      const double h = static_cast<double>(j / 2 + 1);
      const double arg = h * (cls.omega * static_cast<double>(i) + phase);
      m[i * dims + j] = cls.radius / h * (j % 2 == 0 ? std::cos(arg) : std::sin(arg));
    }
  }
  return m;
}

Tensor Standardizer::apply(const Tensor& raw) const {
  Tensor out = raw;
  const std::size_t d = mean.size();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = (out[k] - mean[k % d]) / stddev[k % d];
  return out;
}

Tensor Standardizer::invert(const Tensor& standardized) const {
  Tensor out = standardized;
  const std::size_t d = mean.size();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = out[k] * stddev[k % d] + mean[k % d];
  return out;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

const std::vector<MotionSample>& ToyDataset::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    default: return test;
  }
}

namespace {

void check_config(const DatasetConfig& c) {
  if (c.num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  if (c.per_class < 4) throw std::invalid_argument("need at least 4 samples per class");
  if (c.frames < 1 || c.dims < 1) throw std::invalid_argument("frames and dims must be >= 1");
  if (!(c.noise_scale >= 0.0) || !std::isfinite(c.noise_scale)) throw std::invalid_argument("bad noise_scale");
}

std::size_t holdout(std::size_t n) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * n))); }

Standardizer fit(const std::vector<MotionSample>& train, std::size_t dims) {
  Standardizer s;
  s.mean.assign(dims, 0.0);
  s.stddev.assign(dims, 0.0);
  std::vector<double> count(dims, 0.0);
  for (const auto& m : train) {
    for (std::size_t k = 0; k < m.frames.size(); ++k) {
      s.mean[k % dims] += m.frames[k];
      count[k % dims] += 1.0;
    }
  }
  for (std::size_t j = 0; j < dims; ++j) s.mean[j] /= count[j];
  for (const auto& m : train) {
    for (std::size_t k = 0; k < m.frames.size(); ++k) {
      const double d = m.frames[k] - s.mean[k % dims];
      s.stddev[k % dims] += d * d;
    }
  }
  for (std::size_t j = 0; j < dims; ++j) {
    s.stddev[j] = std::sqrt(s.stddev[j] / count[j]);
    if (!(s.stddev[j] > 0.0)) s.stddev[j] = 1.0;
  }
  return s;
}

}  // namespace

ToyDataset generate_dataset(const DatasetConfig& config) {
  check_config(config);
  ToyDataset ds;
  ds.config = config;
  ds.classes = class_grid(config);
  for (std::size_t a = 0; a < ds.classes.size(); ++a) {
    for (std::size_t b = a + 1; b < ds.classes.size(); ++b) {
      if (ds.classes[a].radius == ds.classes[b].radius && ds.classes[a].omega == ds.classes[b].omega) {
        throw std::invalid_argument("class prototypes must be pairwise distinct");
      }
    }
  }

  Rng rng(derive_seed(config.seed, "toymotion"));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const std::size_t n_hold = holdout(config.per_class);

  for (std::size_t c = 0; c < config.num_classes; ++c) {
    std::vector<MotionSample> samples;
    for (std::size_t i = 0; i < config.per_class; ++i) {
      MotionSample s;
      s.condition = static_cast<ConditionId>(c);
      s.sample_id = c * config.per_class + i;
      s.frames = class_motion(ds.classes[c], config.frames, config.dims, phase(rng));
      if (config.noise_scale > 0.0) {
        for (auto& v : s.frames.values()) v += config.noise_scale * jitter(rng);
      }
      samples.push_back(std::move(s));
    }
    std::shuffle(samples.begin(), samples.end(), rng);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      auto& dst = i < n_hold ? ds.val : i < 2 * n_hold ? ds.test : ds.train;
      dst.push_back(std::move(samples[i]));
    }
  }
  auto by_id = [](const MotionSample& a, const MotionSample& b) { return a.sample_id < b.sample_id; };
  for (auto* split : {&ds.train, &ds.val, &ds.test}) std::sort(split->begin(), split->end(), by_id);

  ds.standardizer = fit(ds.train, config.dims);
  for (auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (auto& s : *split) s.frames = ds.standardizer.apply(s.frames);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// IO

void save_dataset(const std::filesystem::path& dir, const ToyDataset& ds) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "dataset.tsv", std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + (dir / "dataset.tsv").string());
    os << "sample_id\tsplit\tclass";
    for (std::size_t k = 0; k < ds.motion_dim(); ++k) os << "\tv" << k;
    os << '\n';
    char buf[32];
    for (Split sp : {Split::Train, Split::Val, Split::Test}) {
      for (const auto& s : ds.split(sp)) {
        os << s.sample_id << '\t' << split_name(sp) << '\t' << s.condition;
        for (double v : s.frames.values()) {
          std::snprintf(buf, sizeof(buf), "%.17g", v);
          os << '\t' << buf;
        }
        os << '\n';
      }
    }
    if (!os) throw std::runtime_error("write failed for dataset.tsv");
  }
  const auto& c = ds.config;
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& cl : ds.classes) classes.push_back({{"radius", cl.radius}, {"omega", cl.omega}});
  nlohmann::json manifest = {
      {"format", "steplab-toymotion"},
      {"version", 1},
      {"generator",
       {{"num_classes", c.num_classes},
        {"per_class", c.per_class},
        {"frames", c.frames},
        {"dims", c.dims},
        {"noise_scale", c.noise_scale},
        {"seed", c.seed},
        {"hard_negative", c.hard_negative},
        {"hard_negative_gap", c.hard_negative_gap}}},
      {"classes", classes},
      {"standardization", {{"mean", ds.standardizer.mean}, {"stddev", ds.standardizer.stddev}}},
      {"counts", {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}}},
  };
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

ToyDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("missing " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "steplab-toymotion" || manifest.value("version", 0) != 1) {
    throw std::runtime_error((dir / "manifest.json").string() + " is not a version 1 toymotion manifest");
  }
  ToyDataset ds;
  const auto& g = manifest.at("generator");
  auto& c = ds.config;
  c.num_classes = g.at("num_classes");
  c.per_class = g.at("per_class");
  c.frames = g.at("frames");
  c.dims = g.at("dims");
  c.noise_scale = g.at("noise_scale");
  c.seed = g.at("seed");
  c.hard_negative = g.at("hard_negative");
  c.hard_negative_gap = g.at("hard_negative_gap");
  for (const auto& cl : manifest.at("classes")) ds.classes.push_back({cl.at("radius"), cl.at("omega")});
  ds.standardizer.mean = manifest.at("standardization").at("mean").get<std::vector<double>>();
  ds.standardizer.stddev = manifest.at("standardization").at("stddev").get<std::vector<double>>();

  std::ifstream is(dir / "dataset.tsv");
  if (!is) throw std::runtime_error("missing " + (dir / "dataset.tsv").string());
  std::string line;
  std::getline(is, line);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    MotionSample s;
    std::getline(row, field, '\t');
    s.sample_id = std::stoull(field);
    std::string split;
    std::getline(row, split, '\t');
    std::getline(row, field, '\t');
    s.condition = std::stoi(field);
    std::vector<double> values;
    while (std::getline(row, field, '\t')) values.push_back(std::strtod(field.c_str(), nullptr));
    if (values.size() != ds.motion_dim()) {
      throw std::runtime_error("dataset.tsv line " + std::to_string(lineno) + ": expected " +
                               std::to_string(ds.motion_dim()) + " values, got " + std::to_string(values.size()));
    }
    const std::size_t n = values.size();
    s.frames = Tensor({n}, std::move(values));
    if (split == "train") {
      ds.train.push_back(std::move(s));
    } else if (split == "val") {
      ds.val.push_back(std::move(s));
    } else if (split == "test") {
      ds.test.push_back(std::move(s));
    } else {
      throw std::runtime_error("dataset.tsv line " + std::to_string(lineno) + ": unknown split " + split);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Diffusion pretraining

ad::Value noise_prediction_loss(ad::Tape& tape, models::DenoiserParams& theta, std::span<const MotionSample> batch,
                                std::span<const int> timesteps, std::span<const Tensor> noise,
                                const diffusion::NoiseSchedule& schedule) {
  if (batch.empty() || timesteps.size() != batch.size() || noise.size() != batch.size()) {
    throw std::invalid_argument("noise_prediction_loss: batch, timesteps and noise must align");
  }
  ad::Value total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor xt = diffusion::forward_noise(batch[i].frames, timesteps[i], noise[i], schedule);
    const ad::Value pred = models::denoiser_forward(tape, theta, tape.constant(xt), timesteps[i], batch[i].condition);
    const ad::Value d = tape.sub(pred, tape.constant(noise[i]));
    const ad::Value mse = tape.mean(tape.mul(d, d));
    total = total.valid() ? tape.add(total, mse) : mse;
  }
  return tape.scale(total, 1.0 / static_cast<double>(batch.size()));
}

namespace {

struct NoiseDraw {
  std::vector<MotionSample> batch;
  std::vector<int> ts;
  std::vector<Tensor> eps;
};

NoiseDraw draw(const std::vector<MotionSample>& pool, std::size_t n, int steps, std::size_t dim, Rng& rng) {
  NoiseDraw d;
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::uniform_int_distribution<int> t(1, steps);
  for (std::size_t i = 0; i < n; ++i) {
    d.batch.push_back(pool[pick(rng)]);
    d.ts.push_back(t(rng));
    d.eps.push_back(standard_normal({dim}, rng));
  }
  return d;
}

}  // namespace

double diffusion_eval_loss(models::DenoiserParams& theta, const ToyDataset& ds,
                           const diffusion::NoiseSchedule& schedule, std::size_t samples, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "diffusion_eval"));
  const NoiseDraw d = draw(ds.val.empty() ? ds.train : ds.val, samples, schedule.steps(), ds.motion_dim(), rng);
  ad::Tape tape;
  return noise_prediction_loss(tape, theta, d.batch, d.ts, d.eps, schedule).item();
}

std::vector<double> pretrain_diffusion(models::DenoiserParams& theta, const ToyDataset& ds,
                                       const diffusion::NoiseSchedule& schedule,
                                       const DiffusionPretrainConfig& config) {
  if (ds.train.empty()) throw std::invalid_argument("empty training split");
  if (theta.config.motion_dim != ds.motion_dim()) throw ShapeError("denoiser motion_dim does not match dataset");
  models::Adam opt(theta.params, {{config.lr, models::LrDecay::Constant}});
  Rng rng(derive_seed(config.seed, "pretrain_diffusion"));
  std::vector<double> trace;
  trace.reserve(config.steps);
  ad::Tape tape;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const NoiseDraw d = draw(ds.train, config.batch, schedule.steps(), ds.motion_dim(), rng);
    theta.params.zero_grad();
    const ad::Value loss = noise_prediction_loss(tape, theta, d.batch, d.ts, d.eps, schedule);
    const double v = loss.item();
    if (!std::isfinite(v) || v > 1e3) {
      throw TrainingDiverged("diffusion pretraining diverged at step " + std::to_string(step) +
                             " (loss " + std::to_string(v) + ")");
    }
    tape.backward(loss);
    tape.release_graph();
    opt.step(theta.params);
    trace.push_back(v);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Retrieval pretraining

std::vector<RetrievalTracePoint> pretrain_retrieval(models::RewardParams& phi, const ToyDataset& ds,
                                                    const diffusion::NoiseSchedule& schedule,
                                                    const RetrievalPretrainConfig& config) {
  const std::size_t b = std::min(config.batch, ds.config.num_classes);
  if (b < 2) throw std::invalid_argument("contrastive pretraining needs a batch of at least 2");
  if (phi.config.motion_dim != ds.motion_dim()) throw ShapeError("reward motion_dim does not match dataset");

  std::vector<std::vector<std::size_t>> by_class(ds.config.num_classes);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    by_class.at(static_cast<std::size_t>(ds.train[i].condition)).push_back(i);
  }
  std::vector<ConditionId> classes(ds.config.num_classes);
  std::iota(classes.begin(), classes.end(), 0);

  models::Adam opt(phi.params, {{config.lr, models::LrDecay::Constant}});
  Rng rng(derive_seed(config.seed, "pretrain_retrieval"));
  std::bernoulli_distribution noisy(config.noisy_fraction);
  std::uniform_int_distribution<int> tdist(1, schedule.steps());

  std::vector<RetrievalTracePoint> trace;
  ad::Tape tape;
  double last_loss = 0.0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::shuffle(classes.begin(), classes.end(), rng);
    std::vector<Tensor> motions;
    std::vector<ConditionId> conds(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(b));
    std::vector<int> ts(b, 0);
    const bool use_noise = noisy(rng);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& members = by_class[static_cast<std::size_t>(conds[i])];
      const auto& x0 = ds.train[members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)]].frames;
      if (use_noise) {
        ts[i] = tdist(rng);
        motions.push_back(diffusion::forward_noise(x0, ts[i], standard_normal(x0.shape(), rng), schedule));
      } else {
        motions.push_back(x0);
      }
    }
    phi.params.zero_grad();
    const ad::Value loss = spl::contrastive_loss(tape, phi, motions, conds, ts, true);
    last_loss = loss.item();
    if (!std::isfinite(last_loss) || last_loss > 1e3) {
      throw TrainingDiverged("retrieval pretraining diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    tape.release_graph();
    opt.step(phi.params);
    const bool last = step + 1 == config.steps;
    if (last || (config.eval_every > 0 && (step + 1) % config.eval_every == 0)) {
      RetrievalTracePoint p;
      p.step = step + 1;
      p.loss = last_loss;
      if (!ds.val.empty() && ds.val.size() >= config.eval.batch) p.val = spl::eval_retrieval(phi, ds.val, config.eval);
      trace.push_back(std::move(p));
    }
  }
  return trace;
}

}  // namespace steplab::toymotion
