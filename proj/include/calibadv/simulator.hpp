// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale synthetic deep-search environment: an entity-hop corpus, a
// tabular softmax policy over query/answer/garbage actions, and a policy
// gradient training loop with pluggable advantage pipelines. Produces traces
// and telemetry in the regular formats.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "calibadv/analysis.hpp"
#include "calibadv/calibration.hpp"
#include "calibadv/trace.hpp"

namespace calibadv::sim {

// One fact document: "subject -> object". Subjects are unique corpus-wide.
struct FactDoc {
  DocumentId doc_id;
  std::string subject;
  std::string object;
};

struct Question {
  std::string question_id;
  std::string question_text;
  std::vector<std::string> chain;  // hop entity ids e0..eh
  std::vector<DocumentId> chain_docs;
  std::vector<DocumentId> distractor_docs;  // never on any hop chain
  std::string kin;  // word shared by every entity name of this question

  // Three-word surface form used in answers and references. Entities of the
  // same question overlap in exactly the kin word, so a wrong same-question
  // answer scores F1 = 1/3 while the right one scores 1.
  std::string display_name(const std::string& entity) const {
    return entity + " " + kin + " " + entity + "t";
  }
};

struct SyntheticCorpus {
  std::vector<FactDoc> facts;
  std::vector<Question> questions;
  std::unordered_map<std::string, std::size_t> doc_index;      // doc_id -> facts index
  std::unordered_map<std::string, std::size_t> subject_index;  // subject -> facts index
  std::unordered_map<std::string, std::size_t> question_index;

  const Question& question(const std::string& question_id) const;
};

// Deterministic given the seed; distractor docs are disjoint from all chains.
SyntheticCorpus generate_corpus(std::uint64_t seed, int n_questions, int hops, int distractors);

struct Action {
  enum class Type { kQuery, kAnswer, kGarbage };
  Type type = Type::kGarbage;
  std::string entity;  // empty for garbage

  bool operator==(const Action&) const = default;
};

// Synthetic token layout per step: think-prefix tokens, one action token
// carrying log pi(a|s), then filler tokens at the per-action profile logprob.
struct TokenProfile {
  int tokens = 8;                // total per step, >= prefix + 1
  double filler_logprob = -0.1;  // <= 0
};

struct TokenModel {
  TokenProfile query{8, -0.1};
  TokenProfile answer{6, -0.1};
  TokenProfile garbage{12, -4.5};
  double prefix_logprob = -0.02;
};

// Competence prior used to initialize unseen states, standing in for a
// pretrained agent: prefer querying before the last turn, answering on it,
// following the entity revealed by the previous retrieval, and rarely
// answering before any evidence is in.
struct PolicyPrior {
  double query_bias = 1.0;
  double answer_bias = 1.0;
  double follow_bias = 2.0;
  double early_answer_bias = -2.0;  // applied to answers before the last turn
};

struct TabularPolicy {
  double temperature = 1.0;
  std::unordered_map<std::string, std::vector<double>> logits;  // state key -> per-action
};

enum class Pipeline { kBaseline, kCalibAdv };

struct SimConfig {
  std::uint64_t seed = 1;
  int group_size = 5;
  int questions_per_batch = 8;
  double learning_rate = 0.05;
  int updates = 400;
  int hops = 2;
  int distractors = 3;
  int n_questions = 16;
  double temperature = 1.0;
  double ppl_threshold = 50.0;
  TokenModel token_model;
  PolicyPrior policy_prior;
  calibration::CalibrationConfig calibration;
  Pipeline pipeline = Pipeline::kCalibAdv;

  void validate() const;  // throws std::invalid_argument
};

SimConfig load_sim_config(const std::filesystem::path& path);
SimConfig sim_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json sim_config_to_json(const SimConfig& config);

// A (state, action) pair reconstructed from a trace step.
struct Visit {
  std::string state_key;
  std::size_t action_index = 0;
  std::int64_t turn = 0;
  std::string last_entity;  // entity revealed by the previous retrieval, if any
};

class SearchEnv {
 public:
  SearchEnv(const SyntheticCorpus& corpus, const SimConfig& config);

  // Per-question closed action set: query(e) for every known entity, then
  // answer(e), then garbage last.
  const std::vector<Action>& actions(const std::string& question_id) const;

  // Current per-action logits for a state: the stored row when the policy has
  // one, the prior otherwise. Never mutates the policy.
  std::vector<double> action_logits(const TabularPolicy& policy, const std::string& question_id,
                                    std::int64_t turn, const std::string& last_entity) const;

  // Samples G rollouts of up to hops+1 turns each. Deterministic given the
  // generator state; traces satisfy every trace-model invariant.
  RolloutGroup sample_group(const TabularPolicy& policy, const std::string& question_id,
                            int group_size, std::mt19937_64& rng) const;

  // Reconstructs the (state, action) sequence a trace visited.
  std::vector<Visit> replay(const RolloutTrace& trace, const std::string& question_id) const;

  // Score-function update: logits[state] += lr * A * (onehot(a) - pi(.|state))
  // for every visited step; steps with a zero mask count contribute nothing.
  void policy_update(TabularPolicy& policy, const RolloutGroup& group,
                     const grpo::AdvantageAssignment& assignment, double lr) const;

  static std::string state_key(const std::string& question_id, std::int64_t turn,
                               const std::string& last_entity);

 private:
  std::vector<double> prior_logits(const Question& q, std::int64_t turn,
                                   const std::string& last_entity) const;
  std::vector<DocumentId> retrieve(const Question& q, const std::string& entity,
                                   std::mt19937_64& rng) const;

  const SyntheticCorpus* corpus_;
  SimConfig config_;
  bool prepend_think_ = false;
  std::unordered_map<std::string, std::vector<Action>> action_tables_;
  std::unordered_map<std::string, std::unordered_map<std::string, std::size_t>> action_lookup_;
};

struct SimResult {
  std::vector<analysis::TelemetryRecord> telemetry;
  TabularPolicy final_policy;
  std::vector<RolloutGroup> trace_archive;
};

// N batched update iterations, fully reproducible from the seed. Telemetry
// per update: true policy entropy, success rate, neg/pos ratio, PPL stats,
// garbage-action mass and mis-penalization by step index.
SimResult run_experiment(const SimConfig& config);

std::vector<double> softmax(std::span<const double> logits, double temperature);
double entropy(std::span<const double> probabilities);

}  // namespace calibadv::sim
