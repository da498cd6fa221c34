// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "steplab/tensor.hpp"

namespace steplab {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based seed derivation: a sub-seed depends only on the root seed,
/// the stream name and the counter, so adding a stream elsewhere never shifts
/// existing ones.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t counter = 0) {
  return splitmix64(splitmix64(root ^ fnv1a(stream)) + counter);
}

inline Tensor standard_normal(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace steplab
