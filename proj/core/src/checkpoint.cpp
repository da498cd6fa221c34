// SPDX-License-Identifier: Apache-2.0
#include "steplab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace steplab::io {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'T', 'L', 'B', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint");
  return v;
}

std::string get_str(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 24)) throw CheckpointError("implausible string length in checkpoint");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw CheckpointError("truncated checkpoint");
  return s;
}

void check_layout(const ad::ParamSet& expected, const ad::ParamSet& got, const std::string& kind) {
  if (!expected.same_layout(got)) {
    throw CheckpointError(kind + " checkpoint parameter shapes do not match its recorded config");
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put_str(os, ckpt.kind);
  put_str(os, ckpt.meta_json);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    put_str(os, p.name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.value.raw().data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a steplab checkpoint");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.kind = get_str(is);
  ckpt.meta_json = get_str(is);
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_str(is);
    const auto rank = get<std::uint32_t>(is);
    if (rank > 8) throw CheckpointError("implausible rank in checkpoint");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
    std::vector<double> values(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw CheckpointError("truncated checkpoint");
    }
    ckpt.params.add(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

void save_denoiser(const std::filesystem::path& path, const models::DenoiserParams& model) {
  const auto& c = model.config;
  nlohmann::json meta = {{"motion_dim", c.motion_dim}, {"hidden", c.hidden},
                         {"time_dim", c.time_dim},     {"cond_dim", c.cond_dim},
                         {"num_conditions", c.num_conditions}};
  save_checkpoint(path, {"denoiser", meta.dump(), model.params});
}

models::DenoiserParams load_denoiser(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "denoiser") throw CheckpointError(path.string() + " holds a " + ckpt.kind + " checkpoint");
  const auto meta = nlohmann::json::parse(ckpt.meta_json);
  models::DenoiserConfig c;
  c.motion_dim = meta.at("motion_dim");
  c.hidden = meta.at("hidden");
  c.time_dim = meta.at("time_dim");
  c.cond_dim = meta.at("cond_dim");
  c.num_conditions = meta.at("num_conditions");
  check_layout(models::init_denoiser(c, 0).params, ckpt.params, "denoiser");
  return {c, std::move(ckpt.params)};
}

void save_reward(const std::filesystem::path& path, const models::RewardParams& phi) {
  const auto& c = phi.config;
  nlohmann::json meta = {{"motion_dim", c.motion_dim}, {"hidden", c.hidden},
                         {"time_dim", c.time_dim},     {"embed_dim", c.embed_dim},
                         {"num_conditions", c.num_conditions}};
  save_checkpoint(path, {"reward", meta.dump(), phi.params});
}

models::RewardParams load_reward(const std::filesystem::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "reward") throw CheckpointError(path.string() + " holds a " + ckpt.kind + " checkpoint");
  const auto meta = nlohmann::json::parse(ckpt.meta_json);
  models::RewardConfig c;
  c.motion_dim = meta.at("motion_dim");
  c.hidden = meta.at("hidden");
  c.time_dim = meta.at("time_dim");
  c.embed_dim = meta.at("embed_dim");
  c.num_conditions = meta.at("num_conditions");
  check_layout(models::init_reward(c, 0).params, ckpt.params, "reward");
  return {c, std::move(ckpt.params)};
}

}  // namespace steplab::io
