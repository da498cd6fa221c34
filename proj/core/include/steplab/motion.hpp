// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "steplab/tensor.hpp"

namespace steplab {

/// Discrete stand-in for a text prompt; an integer in [0, C).
using ConditionId = int;

/// A fixed-length sequence of d-dimensional frames with its condition.
/// `frames` is stored flat (L * d values, frame-major).
struct MotionSample {
  Tensor frames;
  ConditionId condition = 0;
  std::uint64_t sample_id = 0;
};

}  // namespace steplab
