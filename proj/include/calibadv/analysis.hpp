// SPDX-License-Identifier: Apache-2.0
//
// Training diagnostics: mis-penalization rates by step index, perplexity,
// high-PPL ratio, negative/positive advantage ratio, and the CSV report.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "calibadv/calibration.hpp"
#include "calibadv/grpo.hpp"
#include "calibadv/trace.hpp"

namespace calibadv::analysis {

struct StepMispenalty {
  std::int64_t step_index = 0;
  double proportion = 0.0;       // in [0,1]
  std::int64_t sample_count = 0; // penalized non-empty-retrieval steps at this index

  bool operator==(const StepMispenalty&) const = default;
};

struct TelemetryRecord {
  std::int64_t training_step = 0;
  double mean_token_nll = 0.0;  // mean -logprob over masked tokens
  double perplexity = 1.0;      // exp(mean_token_nll)
  std::optional<double> neg_pos_ratio;  // empty when no positive mass
  double high_ppl_ratio = 0.0;
  std::vector<StepMispenalty> mispenalty_by_step;
  std::optional<double> policy_entropy;  // simulator only: true softmax entropy
  std::optional<double> success_rate;    // simulator only: mean r_final
  std::optional<double> garbage_mass;    // simulator only, not part of the report
};

// For each step index k over all groups: the fraction of intermediate steps
// at k with negative advantage and non-empty retrieval whose retrieved
// documents are all silver. Indices with no such steps are omitted.
// Assignments must be the uncalibrated broadcast assignments.
std::vector<StepMispenalty> mispenalty_rate(std::span<const RolloutGroup> groups,
                                            std::span<const grpo::AdvantageAssignment> assignments,
                                            const calibration::CalibrationConfig& config);
std::vector<StepMispenalty> mispenalty_rate_serial(
    std::span<const RolloutGroup> groups,
    std::span<const grpo::AdvantageAssignment> assignments,
    const calibration::CalibrationConfig& config);

// exp(-mean logprob) over the first mask[s] tokens of each step. Throws when a
// masked step lacks logprobs or no tokens are masked at all.
double rollout_perplexity(const RolloutTrace& trace, std::span<const std::int64_t> mask);

// Fraction of traces whose perplexity is strictly greater than threshold.
double high_ppl_ratio(std::span<const RolloutTrace> traces,
                      std::span<const std::vector<std::int64_t>> masks, double threshold);

// Token-weighted sum of |negative| advantages over token-weighted sum of
// positive ones, across all steps of all assignments. Empty when the
// denominator is zero.
std::optional<double> neg_pos_ratio(std::span<const grpo::AdvantageAssignment> assignments);

// CSV, one row per training step, columns:
//   training_step, mean_token_nll, perplexity, neg_pos_ratio, high_ppl_ratio,
//   policy_entropy, success_rate
// Undefined ratios and absent optional columns serialize as empty fields.
// Values round-trip at full decimal precision.
void emit_report(std::span<const TelemetryRecord> records, const std::filesystem::path& path);
void emit_report(std::span<const TelemetryRecord> records, std::ostream& out);
std::vector<TelemetryRecord> parse_report(const std::filesystem::path& path);

}  // namespace calibadv::analysis
