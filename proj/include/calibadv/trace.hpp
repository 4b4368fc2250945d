// SPDX-License-Identifier: Apache-2.0
//
// Rollout trace data model and the line-delimited on-disk format.
//
// One group per line, each line a JSON object:
//
//   {"question_id": "...", "question_text": "...", "reference_answer": "...",
//    "rollouts": [
//      {"rollout_id": "...", "answer_text": "...", "raw_response": "...",
//       "steps": [
//         {"index": 0, "kind": "intermediate", "query_text": "...",
//          "retrieved_docs": ["d1", "d2"], "token_count": 8,
//          "token_logprobs": [-0.1, ...], "prefix_supplied": true},
//         {"index": 1, "kind": "final_answer", "retrieved_docs": [],
//          "token_count": 6}]}]}
//
// `query_text`, `token_logprobs` and `raw_response` are optional;
// `prefix_supplied` defaults to false and is omitted when false. Numbers
// are serialized with full round-trip precision. Groups are independent,
// so files stream line by line and parse per line in parallel.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace calibadv {

// Corpus-unique document key; equality is exact string equality.
using DocumentId = std::string;

enum class StepKind { kIntermediate, kFinalAnswer };

struct Step {
  std::int64_t index = 0;
  StepKind kind = StepKind::kIntermediate;
  std::optional<std::string> query_text;
  std::vector<DocumentId> retrieved_docs;
  std::int64_t token_count = 0;
  std::optional<std::vector<double>> token_logprobs;  // length == token_count, each <= 0
  bool prefix_supplied = false;  // opening think tag prepended by the harness

  bool operator==(const Step&) const = default;
};

struct RolloutTrace {
  std::string rollout_id;
  std::vector<Step> steps;          // non-empty, indices consecutive from 0
  std::string answer_text;          // empty when the rollout never answered
  std::optional<std::string> raw_response;

  bool operator==(const RolloutTrace&) const = default;

  // Last step when it is a final_answer step, nullptr otherwise.
  const Step* final_step() const;
};

// G >= 2 rollouts sharing a question; the unit of group-relative
// normalization and silver-document computation.
struct RolloutGroup {
  std::string question_id;
  std::string question_text;
  std::string reference_answer;
  std::vector<RolloutTrace> rollouts;

  bool operator==(const RolloutGroup&) const = default;
};

// Throws ValidationError naming the offending rollout_id and field.
void validate_group(const RolloutGroup& group);

// Single line <-> group. Both validate; parse errors carry the line number.
RolloutGroup parse_group_line(const std::string& line, std::size_t line_number);
std::string serialize_group(const RolloutGroup& group);

// Whole-file operations. Parsing decodes lines in parallel and reassembles
// file order; the first offending line (lowest number) is reported.
std::vector<RolloutGroup> parse_trace_file(const std::filesystem::path& path);
std::vector<RolloutGroup> parse_trace_lines(const std::vector<std::string>& lines);
void write_trace_file(const std::vector<RolloutGroup>& groups,
                      const std::filesystem::path& path);

namespace detail {
nlohmann::ordered_json group_to_json(const RolloutGroup& group);
RolloutGroup group_from_json(const nlohmann::json& j);  // ignores unknown keys
std::vector<std::string> read_lines(const std::filesystem::path& path);
}  // namespace detail

}  // namespace calibadv
