// SPDX-License-Identifier: Apache-2.0
//
// Advantage calibration: silver-document soft penalization of intermediate
// steps, positive/negative rebalance at the final answer step, and
// think-prefix decoupling from the loss mask.

#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "calibadv/grpo.hpp"
#include "calibadv/rewards.hpp"
#include "calibadv/trace.hpp"

namespace calibadv::calibration {

struct CalibrationConfig {
  double lambda = 1.0;                // rebalance scaling coefficient, > 0
  double correctness_threshold = 0.5; // r_final cutoff for "correct rollout", in (0,1]
  double eps = 1e-6;                  // added to the population std, > 0
  bool enable_soft_penalty = true;
  bool enable_rebalance = true;
  bool enable_decouple_think = true;
  int think_prefix_tokens = 2;        // prepended think-tag token count, >= 0

  void validate() const;  // throws std::invalid_argument
};

// Union of documents retrieved by the group's correct rollouts.
// source_rollout_count is the number of rollouts contributing (it can be
// positive with an empty doc set when correct rollouts retrieved nothing).
struct SilverDocSet {
  std::string question_id;
  std::set<DocumentId> docs;
  std::size_t source_rollout_count = 0;
};

SilverDocSet silver_documents(const RolloutGroup& group,
                              std::span<const rewards::RewardBreakdown> rewards,
                              double threshold);

// Fraction of the step's distinct retrieved documents that are silver;
// 0 on empty retrieval. Defined for intermediate steps only.
double step_correctness(const Step& step, const SilverDocSet& silver);

// Negative advantages shrink by (1 - c_s); everything else passes through.
double soft_penalize(double advantage, double correctness);

// Over final-answer steps only: with A+ / A- the token-weighted positive and
// absolute negative sums, every positive final-step advantage is scaled by
// lambda * |A-| / A+. No-op when either side is zero; intermediate steps and
// negative final-step advantages are never touched.
grpo::AdvantageAssignment rebalance_final(grpo::AdvantageAssignment assignment,
                                          const RolloutGroup& group, double lambda);

// Steps whose opening think tag was supplied by the harness lose prefix_tokens
// from their mask count (floored at 0); advantages are unchanged.
grpo::AdvantageAssignment decouple_think(grpo::AdvantageAssignment assignment,
                                         const RolloutGroup& group, int prefix_tokens);

struct GroupCalibration {
  grpo::AdvantageAssignment assignment;
  SilverDocSet silver;
  std::vector<rewards::RewardBreakdown> rewards;
};

// Full per-group pipeline: rewards -> group-relative advantages -> broadcast,
// then decouple, soft-penalize, rebalance (each stage only if enabled, in that
// order so the rebalance sums see decoupled masks).
GroupCalibration calibrate_group(const RolloutGroup& group, const CalibrationConfig& config);

// Batch drivers over independent groups. The parallel kernel and the serial
// reference produce identical output for any thread count.
std::vector<GroupCalibration> calibrate_groups(std::span<const RolloutGroup> groups,
                                               const CalibrationConfig& config);
std::vector<GroupCalibration> calibrate_groups_serial(std::span<const RolloutGroup> groups,
                                                      const CalibrationConfig& config);

// Assignment files mirror the trace format with per-step "advantage" and
// "mask_tokens" fields.
std::string serialize_group_with_assignment(const RolloutGroup& group,
                                            const grpo::AdvantageAssignment& assignment);
void write_assignment_file(std::span<const RolloutGroup> groups,
                           std::span<const grpo::AdvantageAssignment> assignments,
                           const std::filesystem::path& path);
std::pair<std::vector<RolloutGroup>, std::vector<grpo::AdvantageAssignment>>
parse_assignment_file(const std::filesystem::path& path);

}  // namespace calibadv::calibration
