// SPDX-License-Identifier: Apache-2.0
//
// Group-relative advantage normalization and the uncalibrated per-step
// broadcast baseline.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "calibadv/trace.hpp"

namespace calibadv::grpo {

// Per-rollout, per-step advantages plus the per-step count of tokens that
// receive them. Shapes mirror the group they were computed from.
struct AdvantageAssignment {
  std::vector<std::vector<double>> advantages;
  std::vector<std::vector<std::int64_t>> mask_tokens;

  bool operator==(const AdvantageAssignment&) const = default;
};

// A_i = (r_i - mean) / (pop_std + eps). All-equal rewards yield all zeros.
// Requires G >= 2 and eps >= 0.
std::vector<double> group_relative_advantages(std::span<const double> rewards, double eps);

// Every step of rollout i carries A_i; mask_tokens start at each step's full
// token_count (decoupling, when enabled, trims them later in the pipeline).
AdvantageAssignment broadcast(const RolloutGroup& group,
                              std::span<const double> rollout_advantages);

}  // namespace calibadv::grpo
