// SPDX-License-Identifier: Apache-2.0

#include "calibadv/trace.hpp"

#include <cmath>
#include <exception>
#include <fstream>
#include <unordered_set>
#include <utility>

#include "calibadv/errors.hpp"
#include "calibadv/threading.hpp"

namespace calibadv {

namespace {

const nlohmann::json& require_key(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(0, std::string("missing key '") + key + "'");
  return *it;
}

std::string require_string(const nlohmann::json& j, const char* key) {
  const auto& v = require_key(j, key);
  if (!v.is_string()) throw ParseError(0, std::string("key '") + key + "' must be a string");
  return v.get<std::string>();
}

std::int64_t require_int(const nlohmann::json& j, const char* key) {
  const auto& v = require_key(j, key);
  if (!v.is_number_integer())
    throw ParseError(0, std::string("key '") + key + "' must be an integer");
  return v.get<std::int64_t>();
}

Step step_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError(0, "step must be an object");
  Step s;
  s.index = require_int(j, "index");
  const std::string kind = require_string(j, "kind");
  if (kind == "intermediate") {
    s.kind = StepKind::kIntermediate;
  } else if (kind == "final_answer") {
    s.kind = StepKind::kFinalAnswer;
  } else {
    throw ParseError(0, "unknown step kind '" + kind + "'");
  }
  if (auto it = j.find("query_text"); it != j.end()) {
    if (!it->is_string()) throw ParseError(0, "key 'query_text' must be a string");
    s.query_text = it->get<std::string>();
  }
  const auto& docs = require_key(j, "retrieved_docs");
  if (!docs.is_array()) throw ParseError(0, "key 'retrieved_docs' must be an array");
  for (const auto& d : docs) {
    if (!d.is_string()) throw ParseError(0, "retrieved_docs entries must be strings");
    s.retrieved_docs.push_back(d.get<std::string>());
  }
  s.token_count = require_int(j, "token_count");
  if (auto it = j.find("token_logprobs"); it != j.end()) {
    if (!it->is_array()) throw ParseError(0, "key 'token_logprobs' must be an array");
    std::vector<double> lps;
    for (const auto& v : *it) {
      if (!v.is_number()) throw ParseError(0, "token_logprobs entries must be numbers");
      lps.push_back(v.get<double>());
    }
    s.token_logprobs = std::move(lps);
  }
  if (auto it = j.find("prefix_supplied"); it != j.end()) {
    if (!it->is_boolean()) throw ParseError(0, "key 'prefix_supplied' must be a boolean");
    s.prefix_supplied = it->get<bool>();
  }
  return s;
}

nlohmann::ordered_json step_to_json(const Step& s) {
  nlohmann::ordered_json j;
  j["index"] = s.index;
  j["kind"] = s.kind == StepKind::kFinalAnswer ? "final_answer" : "intermediate";
  if (s.query_text) j["query_text"] = *s.query_text;
  j["retrieved_docs"] = s.retrieved_docs;
  j["token_count"] = s.token_count;
  if (s.token_logprobs) j["token_logprobs"] = *s.token_logprobs;
  if (s.prefix_supplied) j["prefix_supplied"] = true;
  return j;
}

void validate_step(const RolloutTrace& rollout, const Step& s, std::size_t position) {
  const std::string& rid = rollout.rollout_id;
  if (s.index != static_cast<std::int64_t>(position))
    throw ValidationError(rid, "index",
                          "step indices must be consecutive from 0, got " +
                              std::to_string(s.index) + " at position " + std::to_string(position));
  if (s.token_count < 0)
    throw ValidationError(rid, "token_count", "must be >= 0");
  if (s.token_logprobs) {
    if (static_cast<std::int64_t>(s.token_logprobs->size()) != s.token_count)
      throw ValidationError(rid, "token_logprobs",
                            "length " + std::to_string(s.token_logprobs->size()) +
                                " does not match token_count " + std::to_string(s.token_count));
    for (double lp : *s.token_logprobs) {
      if (!std::isfinite(lp) || lp > 0.0)
        throw ValidationError(rid, "token_logprobs", "entries must be finite and <= 0");
    }
  }
  for (const DocumentId& d : s.retrieved_docs) {
    if (d.empty()) throw ValidationError(rid, "retrieved_docs", "document ids must be non-empty");
  }
  if (s.kind == StepKind::kFinalAnswer) {
    if (!s.retrieved_docs.empty())
      throw ValidationError(rid, "retrieved_docs", "final_answer steps retrieve nothing");
    if (s.query_text)
      throw ValidationError(rid, "query_text", "final_answer steps carry no query");
  }
}

}  // namespace

const Step* RolloutTrace::final_step() const {
  if (steps.empty()) return nullptr;
  const Step& last = steps.back();
  return last.kind == StepKind::kFinalAnswer ? &last : nullptr;
}

void validate_group(const RolloutGroup& group) {
  if (group.rollouts.size() < 2)
    throw ValidationError("", "rollouts",
                          "group '" + group.question_id + "' needs G >= 2 rollouts, got " +
                              std::to_string(group.rollouts.size()));
  std::unordered_set<std::string> seen_ids;
  for (const RolloutTrace& r : group.rollouts) {
    if (!seen_ids.insert(r.rollout_id).second)
      throw ValidationError(r.rollout_id, "rollout_id", "duplicate within group");
    if (r.steps.empty()) throw ValidationError(r.rollout_id, "steps", "must be non-empty");
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
      validate_step(r, r.steps[i], i);
      if (r.steps[i].kind == StepKind::kFinalAnswer && i + 1 != r.steps.size())
        throw ValidationError(r.rollout_id, "kind",
                              "final_answer step must be the last step of the rollout");
    }
    if (!r.answer_text.empty() && r.final_step() == nullptr)
      throw ValidationError(r.rollout_id, "answer_text",
                            "non-empty answer requires a trailing final_answer step");
  }
}

namespace detail {

RolloutGroup group_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError(0, "group record must be an object");
  RolloutGroup g;
  g.question_id = require_string(j, "question_id");
  g.question_text = require_string(j, "question_text");
  g.reference_answer = require_string(j, "reference_answer");
  const auto& rollouts = require_key(j, "rollouts");
  if (!rollouts.is_array()) throw ParseError(0, "key 'rollouts' must be an array");
  for (const auto& rj : rollouts) {
    if (!rj.is_object()) throw ParseError(0, "rollout must be an object");
    RolloutTrace r;
    r.rollout_id = require_string(rj, "rollout_id");
    r.answer_text = require_string(rj, "answer_text");
    if (auto it = rj.find("raw_response"); it != rj.end()) {
      if (!it->is_string()) throw ParseError(0, "key 'raw_response' must be a string");
      r.raw_response = it->get<std::string>();
    }
    const auto& steps = require_key(rj, "steps");
    if (!steps.is_array()) throw ParseError(0, "key 'steps' must be an array");
    for (const auto& sj : steps) r.steps.push_back(step_from_json(sj));
    g.rollouts.push_back(std::move(r));
  }
  return g;
}

nlohmann::ordered_json group_to_json(const RolloutGroup& group) {
  nlohmann::ordered_json j;
  j["question_id"] = group.question_id;
  j["question_text"] = group.question_text;
  j["reference_answer"] = group.reference_answer;
  auto rollouts = nlohmann::ordered_json::array();
  for (const RolloutTrace& r : group.rollouts) {
    nlohmann::ordered_json rj;
    rj["rollout_id"] = r.rollout_id;
    rj["answer_text"] = r.answer_text;
    if (r.raw_response) rj["raw_response"] = *r.raw_response;
    auto steps = nlohmann::ordered_json::array();
    for (const Step& s : r.steps) steps.push_back(step_to_json(s));
    rj["steps"] = std::move(steps);
    rollouts.push_back(std::move(rj));
  }
  j["rollouts"] = std::move(rollouts);
  return j;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace detail

RolloutGroup parse_group_line(const std::string& line, std::size_t line_number) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_number, e.what());
  }
  try {
    RolloutGroup g = detail::group_from_json(j);
    validate_group(g);
    return g;
  } catch (const ParseError& e) {
    throw ParseError(line_number, e.detail());
  } catch (const ValidationError& e) {
    throw ValidationError(e.rollout_id(), e.field(), e.detail(), line_number);
  }
}

std::string serialize_group(const RolloutGroup& group) {
  validate_group(group);
  return detail::group_to_json(group).dump();
}

std::vector<RolloutGroup> parse_trace_lines(const std::vector<std::string>& lines) {
  const std::int64_t n = static_cast<std::int64_t>(lines.size());
  std::vector<RolloutGroup> groups(lines.size());
  std::vector<std::exception_ptr> errors(lines.size());

#pragma omp parallel for schedule(dynamic, 16) num_threads(max_parallelism())
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      groups[i] = parse_group_line(lines[i], static_cast<std::size_t>(i) + 1);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }
  return groups;
}

std::vector<RolloutGroup> parse_trace_file(const std::filesystem::path& path) {
  return parse_trace_lines(detail::read_lines(path));
}

void write_trace_file(const std::vector<RolloutGroup>& groups,
                      const std::filesystem::path& path) {
  for (const RolloutGroup& g : groups) validate_group(g);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const RolloutGroup& g : groups) out << detail::group_to_json(g).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace calibadv
