// SPDX-License-Identifier: Apache-2.0

#include "calibadv/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <system_error>

#include "calibadv/errors.hpp"
#include "calibadv/rewards.hpp"
#include "calibadv/threading.hpp"

namespace calibadv::analysis {

namespace {

struct MispenaltyCounts {
  std::map<std::int64_t, std::pair<std::int64_t, std::int64_t>> by_index;  // idx -> (hits, total)
};

// Counts for one group: denominators are intermediate steps with negative
// advantage and non-empty retrieval; hits are those whose distinct retrieved
// docs all lie in the group's silver set.
MispenaltyCounts count_group(const RolloutGroup& group,
                             const grpo::AdvantageAssignment& assignment,
                             const calibration::CalibrationConfig& config) {
  if (assignment.advantages.size() != group.rollouts.size())
    throw std::invalid_argument("assignment does not match group");
  std::vector<rewards::RewardBreakdown> breakdowns;
  breakdowns.reserve(group.rollouts.size());
  for (const RolloutTrace& r : group.rollouts)
    breakdowns.push_back(rewards::final_reward(r, group.reference_answer));
  const calibration::SilverDocSet silver =
      calibration::silver_documents(group, breakdowns, config.correctness_threshold);

  MispenaltyCounts counts;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const RolloutTrace& r = group.rollouts[i];
    if (assignment.advantages[i].size() != r.steps.size())
      throw std::invalid_argument("assignment does not match group");
    for (std::size_t s = 0; s < r.steps.size(); ++s) {
      const Step& step = r.steps[s];
      if (step.kind != StepKind::kIntermediate) continue;
      if (!(assignment.advantages[i][s] < 0.0)) continue;
      if (step.retrieved_docs.empty()) continue;  // cannot be "all silver"
      auto& [hits, total] = counts.by_index[step.index];
      ++total;
      const bool all_silver = std::all_of(
          step.retrieved_docs.begin(), step.retrieved_docs.end(),
          [&](const DocumentId& d) { return silver.docs.count(d) != 0; });
      if (all_silver) ++hits;
    }
  }
  return counts;
}

std::vector<StepMispenalty> finalize(const MispenaltyCounts& counts) {
  std::vector<StepMispenalty> out;
  out.reserve(counts.by_index.size());
  for (const auto& [index, hc] : counts.by_index) {
    out.push_back({index,
                   static_cast<double>(hc.first) / static_cast<double>(hc.second),
                   hc.second});
  }
  return out;
}

void merge(MispenaltyCounts& into, const MispenaltyCounts& from) {
  for (const auto& [index, hc] : from.by_index) {
    auto& slot = into.by_index[index];
    slot.first += hc.first;
    slot.second += hc.second;
  }
}

}  // namespace

std::vector<StepMispenalty> mispenalty_rate_serial(
    std::span<const RolloutGroup> groups,
    std::span<const grpo::AdvantageAssignment> assignments,
    const calibration::CalibrationConfig& config) {
  if (groups.size() != assignments.size())
    throw std::invalid_argument("group/assignment count mismatch");
  MispenaltyCounts counts;
  for (std::size_t i = 0; i < groups.size(); ++i)
    merge(counts, count_group(groups[i], assignments[i], config));
  return finalize(counts);
}

std::vector<StepMispenalty> mispenalty_rate(std::span<const RolloutGroup> groups,
                                            std::span<const grpo::AdvantageAssignment> assignments,
                                            const calibration::CalibrationConfig& config) {
  if (groups.size() != assignments.size())
    throw std::invalid_argument("group/assignment count mismatch");
  const std::int64_t n = static_cast<std::int64_t>(groups.size());
  std::vector<MispenaltyCounts> partials(groups.size());
  std::vector<std::exception_ptr> errors(groups.size());

#pragma omp parallel for schedule(dynamic, 8) num_threads(max_parallelism())
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      partials[i] = count_group(groups[i], assignments[i], config);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  // Integer counts merge in group order, so the result is identical to the
  // serial reference for any thread count.
  MispenaltyCounts counts;
  for (const MispenaltyCounts& p : partials) merge(counts, p);
  return finalize(counts);
}

double rollout_perplexity(const RolloutTrace& trace, std::span<const std::int64_t> mask) {
  if (mask.size() != trace.steps.size())
    throw std::invalid_argument("mask does not match step count");
  double nll = 0.0;
  std::int64_t tokens = 0;
  for (std::size_t s = 0; s < trace.steps.size(); ++s) {
    const std::int64_t m = std::clamp<std::int64_t>(mask[s], 0, trace.steps[s].token_count);
    if (m == 0) continue;
    if (!trace.steps[s].token_logprobs)
      throw std::invalid_argument("rollout '" + trace.rollout_id + "' step " +
                                  std::to_string(trace.steps[s].index) +
                                  " has no token_logprobs");
    const auto& lps = *trace.steps[s].token_logprobs;
    for (std::int64_t t = 0; t < m; ++t) nll -= lps[static_cast<std::size_t>(t)];
    tokens += m;
  }
  if (tokens == 0)
    throw std::invalid_argument("rollout '" + trace.rollout_id + "' has no masked tokens");
  return std::exp(nll / static_cast<double>(tokens));
}

double high_ppl_ratio(std::span<const RolloutTrace> traces,
                      std::span<const std::vector<std::int64_t>> masks, double threshold) {
  if (traces.empty()) throw std::invalid_argument("high_ppl_ratio needs at least one trace");
  if (traces.size() != masks.size())
    throw std::invalid_argument("trace/mask count mismatch");
  std::size_t high = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (rollout_perplexity(traces[i], masks[i]) > threshold) ++high;
  }
  return static_cast<double>(high) / static_cast<double>(traces.size());
}

std::optional<double> neg_pos_ratio(std::span<const grpo::AdvantageAssignment> assignments) {
  double positive = 0.0;
  double negative = 0.0;
  for (const grpo::AdvantageAssignment& a : assignments) {
    for (std::size_t i = 0; i < a.advantages.size(); ++i) {
      for (std::size_t s = 0; s < a.advantages[i].size(); ++s) {
        const double adv = a.advantages[i][s];
        const double w = static_cast<double>(a.mask_tokens[i][s]);
        if (adv > 0.0) positive += adv * w;
        if (adv < 0.0) negative += -adv * w;
      }
    }
  }
  if (positive <= 0.0) return std::nullopt;
  return negative / positive;
}

namespace {

constexpr const char* kHeader =
    "training_step,mean_token_nll,perplexity,neg_pos_ratio,high_ppl_ratio,"
    "policy_entropy,success_rate";

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::optional<double> parse_optional_double(std::string_view field, std::size_t line_no) {
  if (field.empty()) return std::nullopt;
  double v = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    throw ParseError(line_no, "bad numeric field '" + std::string(field) + "'");
  return v;
}

}  // namespace

void emit_report(std::span<const TelemetryRecord> records, std::ostream& out) {
  out << kHeader << '\n';
  for (const TelemetryRecord& r : records) {
    out << r.training_step << ',' << format_double(r.mean_token_nll) << ','
        << format_double(r.perplexity) << ','
        << (r.neg_pos_ratio ? format_double(*r.neg_pos_ratio) : "") << ','
        << format_double(r.high_ppl_ratio) << ','
        << (r.policy_entropy ? format_double(*r.policy_entropy) : "") << ','
        << (r.success_rate ? format_double(*r.success_rate) : "") << '\n';
  }
}

void emit_report(std::span<const TelemetryRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  emit_report(records, static_cast<std::ostream&>(out));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<TelemetryRecord> parse_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing report header");
  if (line != kHeader) throw ParseError(1, "unexpected report header '" + line + "'");
  std::vector<TelemetryRecord> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    if (fields.size() != 7)
      throw ParseError(line_no, "expected 7 fields, got " + std::to_string(fields.size()));
    TelemetryRecord r;
    const auto step = parse_optional_double(fields[0], line_no);
    const auto nll = parse_optional_double(fields[1], line_no);
    const auto ppl = parse_optional_double(fields[2], line_no);
    const auto high = parse_optional_double(fields[4], line_no);
    if (!step || !nll || !ppl || !high)
      throw ParseError(line_no, "missing required field");
    r.training_step = static_cast<std::int64_t>(*step);
    r.mean_token_nll = *nll;
    r.perplexity = *ppl;
    r.neg_pos_ratio = parse_optional_double(fields[3], line_no);
    r.high_ppl_ratio = *high;
    r.policy_entropy = parse_optional_double(fields[5], line_no);
    r.success_rate = parse_optional_double(fields[6], line_no);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace calibadv::analysis
