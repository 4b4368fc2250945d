// SPDX-License-Identifier: Apache-2.0

#include "calibadv/calibration.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "calibadv/errors.hpp"
#include "calibadv/threading.hpp"

namespace calibadv::calibration {

void CalibrationConfig::validate() const {
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
  if (!(correctness_threshold > 0.0) || correctness_threshold > 1.0)
    throw std::invalid_argument("correctness_threshold must be in (0,1]");
  if (!(eps > 0.0)) throw std::invalid_argument("eps must be > 0");
  if (think_prefix_tokens < 0) throw std::invalid_argument("think_prefix_tokens must be >= 0");
}

SilverDocSet silver_documents(const RolloutGroup& group,
                              std::span<const rewards::RewardBreakdown> breakdowns,
                              double threshold) {
  if (breakdowns.size() != group.rollouts.size())
    throw std::invalid_argument("reward list does not match rollout count");
  SilverDocSet silver;
  silver.question_id = group.question_id;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    if (breakdowns[i].r_final < threshold) continue;
    ++silver.source_rollout_count;
    for (const Step& s : group.rollouts[i].steps)
      silver.docs.insert(s.retrieved_docs.begin(), s.retrieved_docs.end());
  }
  return silver;
}

double step_correctness(const Step& step, const SilverDocSet& silver) {
  if (step.kind != StepKind::kIntermediate)
    throw std::invalid_argument("correctness score is defined for intermediate steps only");
  const std::set<DocumentId> docs(step.retrieved_docs.begin(), step.retrieved_docs.end());
  if (docs.empty()) return 0.0;
  std::size_t hits = 0;
  for (const DocumentId& d : docs) hits += silver.docs.count(d);
  return static_cast<double>(hits) / static_cast<double>(docs.size());
}

double soft_penalize(double advantage, double correctness) {
  if (!(correctness >= 0.0 && correctness <= 1.0))
    throw std::invalid_argument("correctness score must lie in [0,1]");
  return advantage < 0.0 ? advantage * (1.0 - correctness) : advantage;
}

namespace {

void check_shape(const grpo::AdvantageAssignment& assignment, const RolloutGroup& group) {
  if (assignment.advantages.size() != group.rollouts.size() ||
      assignment.mask_tokens.size() != group.rollouts.size())
    throw std::invalid_argument("assignment shape does not match group");
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    if (assignment.advantages[i].size() != group.rollouts[i].steps.size() ||
        assignment.mask_tokens[i].size() != group.rollouts[i].steps.size())
      throw std::invalid_argument("assignment step shape does not match group");
  }
}

}  // namespace

grpo::AdvantageAssignment rebalance_final(grpo::AdvantageAssignment assignment,
                                          const RolloutGroup& group, double lambda) {
  check_shape(assignment, group);
  double positive = 0.0;
  double negative = 0.0;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Step* fin = group.rollouts[i].final_step();
    if (fin == nullptr) continue;
    const std::size_t s = group.rollouts[i].steps.size() - 1;
    const double a = assignment.advantages[i][s];
    const double w = static_cast<double>(assignment.mask_tokens[i][s]);
    if (a > 0.0) positive += a * w;
    if (a < 0.0) negative += -a * w;
  }
  // A restored positive signal needs both sides present; an all-positive or
  // all-negative final step is left alone.
  if (positive <= 0.0 || negative <= 0.0) return assignment;
  const double scale = lambda * (negative / positive);
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    if (group.rollouts[i].final_step() == nullptr) continue;
    const std::size_t s = group.rollouts[i].steps.size() - 1;
    if (assignment.advantages[i][s] > 0.0) assignment.advantages[i][s] *= scale;
  }
  return assignment;
}

grpo::AdvantageAssignment decouple_think(grpo::AdvantageAssignment assignment,
                                         const RolloutGroup& group, int prefix_tokens) {
  check_shape(assignment, group);
  if (prefix_tokens < 0) throw std::invalid_argument("prefix token count must be >= 0");
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const RolloutTrace& r = group.rollouts[i];
    for (std::size_t s = 0; s < r.steps.size(); ++s) {
      if (!r.steps[s].prefix_supplied) continue;
      assignment.mask_tokens[i][s] =
          std::max<std::int64_t>(0, assignment.mask_tokens[i][s] - prefix_tokens);
    }
  }
  return assignment;
}

GroupCalibration calibrate_group(const RolloutGroup& group, const CalibrationConfig& config) {
  config.validate();
  GroupCalibration out;
  out.rewards.reserve(group.rollouts.size());
  std::vector<double> finals;
  finals.reserve(group.rollouts.size());
  for (const RolloutTrace& r : group.rollouts) {
    out.rewards.push_back(rewards::final_reward(r, group.reference_answer));
    finals.push_back(out.rewards.back().r_final);
  }
  out.assignment = grpo::broadcast(group, grpo::group_relative_advantages(finals, config.eps));
  out.silver = silver_documents(group, out.rewards, config.correctness_threshold);

  if (config.enable_decouple_think)
    out.assignment = decouple_think(std::move(out.assignment), group, config.think_prefix_tokens);

  if (config.enable_soft_penalty) {
    for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
      const RolloutTrace& r = group.rollouts[i];
      for (std::size_t s = 0; s < r.steps.size(); ++s) {
        if (r.steps[s].kind != StepKind::kIntermediate) continue;
        out.assignment.advantages[i][s] = soft_penalize(
            out.assignment.advantages[i][s], step_correctness(r.steps[s], out.silver));
      }
    }
  }

  if (config.enable_rebalance)
    out.assignment = rebalance_final(std::move(out.assignment), group, config.lambda);
  return out;
}

std::vector<GroupCalibration> calibrate_groups_serial(std::span<const RolloutGroup> groups,
                                                      const CalibrationConfig& config) {
  std::vector<GroupCalibration> out(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) out[i] = calibrate_group(groups[i], config);
  return out;
}

std::vector<GroupCalibration> calibrate_groups(std::span<const RolloutGroup> groups,
                                               const CalibrationConfig& config) {
  config.validate();
  const std::int64_t n = static_cast<std::int64_t>(groups.size());
  std::vector<GroupCalibration> out(groups.size());
  std::vector<std::exception_ptr> errors(groups.size());

#pragma omp parallel for schedule(dynamic, 8) num_threads(max_parallelism())
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      out[i] = calibrate_group(groups[i], config);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  return out;
}

std::string serialize_group_with_assignment(const RolloutGroup& group,
                                            const grpo::AdvantageAssignment& assignment) {
  check_shape(assignment, group);
  nlohmann::ordered_json j = detail::group_to_json(group);
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    auto& steps = j["rollouts"][i]["steps"];
    for (std::size_t s = 0; s < group.rollouts[i].steps.size(); ++s) {
      steps[s]["advantage"] = assignment.advantages[i][s];
      steps[s]["mask_tokens"] = assignment.mask_tokens[i][s];
    }
  }
  return j.dump();
}

void write_assignment_file(std::span<const RolloutGroup> groups,
                           std::span<const grpo::AdvantageAssignment> assignments,
                           const std::filesystem::path& path) {
  if (groups.size() != assignments.size())
    throw std::invalid_argument("group/assignment count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (std::size_t i = 0; i < groups.size(); ++i)
    out << serialize_group_with_assignment(groups[i], assignments[i]) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::pair<std::vector<RolloutGroup>, std::vector<grpo::AdvantageAssignment>>
parse_assignment_file(const std::filesystem::path& path) {
  const std::vector<std::string> lines = detail::read_lines(path);
  std::vector<RolloutGroup> groups;
  std::vector<grpo::AdvantageAssignment> assignments;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    groups.push_back(parse_group_line(lines[i], line_no));
    nlohmann::json j = nlohmann::json::parse(lines[i]);
    grpo::AdvantageAssignment a;
    for (const auto& rj : j["rollouts"]) {
      std::vector<double> advs;
      std::vector<std::int64_t> masks;
      for (const auto& sj : rj["steps"]) {
        if (!sj.contains("advantage") || !sj["advantage"].is_number())
          throw ParseError(line_no, "step is missing a numeric 'advantage'");
        if (!sj.contains("mask_tokens") || !sj["mask_tokens"].is_number_integer())
          throw ParseError(line_no, "step is missing an integer 'mask_tokens'");
        advs.push_back(sj["advantage"].get<double>());
        masks.push_back(sj["mask_tokens"].get<std::int64_t>());
      }
      a.advantages.push_back(std::move(advs));
      a.mask_tokens.push_back(std::move(masks));
    }
    assignments.push_back(std::move(a));
  }
  return {std::move(groups), std::move(assignments)};
}

}  // namespace calibadv::calibration
