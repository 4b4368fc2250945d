// SPDX-License-Identifier: Apache-2.0

#include "calibadv/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "calibadv/errors.hpp"

namespace calibadv::sim {

namespace {

constexpr int kRetrievalDistractors = 2;  // distractor docs mixed into each retrieval
constexpr double kMinLogProb = -700.0;    // keeps sampled-token logprobs finite

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string hex_tag(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(4, '0');
  for (int i = 0; i < 4; ++i) out[i] = digits[(v >> (4 * i)) & 0xF];
  return out;
}

std::size_t sample_categorical(std::span<const double> probs, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

std::vector<double> make_logprobs(const TokenProfile& profile, double action_logprob,
                                  int prefix_tokens, double prefix_logprob) {
  std::vector<double> lps;
  lps.reserve(static_cast<std::size_t>(profile.tokens));
  for (int i = 0; i < prefix_tokens && std::ssize(lps) < profile.tokens; ++i)
    lps.push_back(prefix_logprob);
  if (std::ssize(lps) < profile.tokens) lps.push_back(std::max(action_logprob, kMinLogProb));
  while (std::ssize(lps) < profile.tokens) lps.push_back(profile.filler_logprob);
  return lps;
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  std::vector<double> out(logits.size());
  const double hi = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - hi) / temperature);
    z += out[i];
  }
  for (double& p : out) p /= z;
  return out;
}

double entropy(std::span<const double> probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

const Question& SyntheticCorpus::question(const std::string& question_id) const {
  auto it = question_index.find(question_id);
  if (it == question_index.end())
    throw std::invalid_argument("unknown question '" + question_id + "'");
  return questions[it->second];
}

SyntheticCorpus generate_corpus(std::uint64_t seed, int n_questions, int hops, int distractors) {
  if (hops < 1) throw std::invalid_argument("hops must be >= 1");
  if (n_questions < 1) throw std::invalid_argument("n_questions must be >= 1");
  if (distractors < 0) throw std::invalid_argument("distractors must be >= 0");

  SyntheticCorpus corpus;
  std::mt19937_64 rng(splitmix64(seed));
  for (int qi = 0; qi < n_questions; ++qi) {
    const std::string tag = "q" + std::to_string(qi) + hex_tag(rng());
    Question q;
    q.question_id = "q" + std::to_string(qi);
    q.kin = tag + "kin";
    for (int k = 0; k <= hops; ++k) q.chain.push_back(tag + "c" + std::to_string(k));
    q.question_text = "what entity is reached from " + q.chain.front() + " after " +
                      std::to_string(hops) + " hops";
    for (int k = 0; k < hops; ++k) {
      FactDoc doc{tag + "d" + std::to_string(k), q.chain[k], q.chain[k + 1]};
      q.chain_docs.push_back(doc.doc_id);
      corpus.facts.push_back(std::move(doc));
    }
    for (int j = 0; j < distractors; ++j) {
      FactDoc doc{tag + "z" + std::to_string(j), tag + "x" + std::to_string(j) + "s",
                  tag + "x" + std::to_string(j) + "o"};
      q.distractor_docs.push_back(doc.doc_id);
      corpus.facts.push_back(std::move(doc));
    }
    corpus.question_index[q.question_id] = corpus.questions.size();
    corpus.questions.push_back(std::move(q));
  }
  for (std::size_t i = 0; i < corpus.facts.size(); ++i) {
    corpus.doc_index[corpus.facts[i].doc_id] = i;
    corpus.subject_index[corpus.facts[i].subject] = i;
  }
  return corpus;
}

void SimConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
  if (questions_per_batch < 1) throw std::invalid_argument("questions_per_batch must be >= 1");
  if (updates < 1) throw std::invalid_argument("updates must be >= 1");
  if (hops < 1) throw std::invalid_argument("hops must be >= 1");
  if (distractors < 0) throw std::invalid_argument("distractors must be >= 0");
  if (n_questions < 1) throw std::invalid_argument("n_questions must be >= 1");
  if (learning_rate < 0.0) throw std::invalid_argument("learning_rate must be >= 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (!(ppl_threshold > 0.0)) throw std::invalid_argument("ppl_threshold must be > 0");
  for (const TokenProfile* p : {&token_model.query, &token_model.answer, &token_model.garbage}) {
    if (p->tokens < calibration.think_prefix_tokens + 1)
      throw std::invalid_argument("token profile must cover the think prefix plus one token");
    if (p->filler_logprob > 0.0)
      throw std::invalid_argument("filler_logprob must be <= 0");
  }
  if (token_model.prefix_logprob > 0.0)
    throw std::invalid_argument("prefix_logprob must be <= 0");
  calibration.validate();
}

SearchEnv::SearchEnv(const SyntheticCorpus& corpus, const SimConfig& config)
    : corpus_(&corpus), config_(config) {
  config_.validate();
  prepend_think_ =
      config_.pipeline == Pipeline::kCalibAdv && config_.calibration.enable_decouple_think;
  for (const Question& q : corpus.questions) {
    std::vector<std::string> known = q.chain;
    for (const DocumentId& d : q.distractor_docs)
      known.push_back(corpus.facts[corpus.doc_index.at(d)].subject);
    for (const DocumentId& d : q.distractor_docs)
      known.push_back(corpus.facts[corpus.doc_index.at(d)].object);

    std::vector<Action> acts;
    for (const std::string& e : known) acts.push_back({Action::Type::kQuery, e});
    for (const std::string& e : known) acts.push_back({Action::Type::kAnswer, e});
    acts.push_back({Action::Type::kGarbage, ""});

    auto& lookup = action_lookup_[q.question_id];
    for (std::size_t i = 0; i < acts.size(); ++i) {
      switch (acts[i].type) {
        case Action::Type::kQuery:
          lookup["q|" + acts[i].entity] = i;
          break;
        case Action::Type::kAnswer:
          // answers are looked up by the surface form traces carry
          lookup["a|" + q.display_name(acts[i].entity)] = i;
          break;
        case Action::Type::kGarbage:
          lookup["g|"] = i;
          break;
      }
    }
    action_tables_[q.question_id] = std::move(acts);
  }
}

const std::vector<Action>& SearchEnv::actions(const std::string& question_id) const {
  auto it = action_tables_.find(question_id);
  if (it == action_tables_.end())
    throw std::invalid_argument("unknown question '" + question_id + "'");
  return it->second;
}

std::string SearchEnv::state_key(const std::string& question_id, std::int64_t turn,
                                 const std::string& last_entity) {
  return question_id + "|" + std::to_string(turn) + "|" + last_entity;
}

std::vector<double> SearchEnv::prior_logits(const Question& q, std::int64_t turn,
                                            const std::string& last_entity) const {
  const auto& acts = actions(q.question_id);
  std::vector<double> logits(acts.size(), 0.0);
  const bool last_turn = turn >= config_.hops;
  const std::string& follow = last_entity.empty() ? q.chain.front() : last_entity;
  for (std::size_t i = 0; i < acts.size(); ++i) {
    const Action& a = acts[i];
    if (a.type == Action::Type::kQuery && !last_turn) {
      logits[i] += config_.policy_prior.query_bias;
      if (a.entity == follow) logits[i] += config_.policy_prior.follow_bias;
    } else if (a.type == Action::Type::kAnswer) {
      if (last_turn) {
        logits[i] += config_.policy_prior.answer_bias;
        if (!last_entity.empty() && a.entity == last_entity)
          logits[i] += config_.policy_prior.follow_bias;
      } else {
        logits[i] += config_.policy_prior.early_answer_bias;
      }
    }
  }
  return logits;
}

std::vector<double> SearchEnv::action_logits(const TabularPolicy& policy,
                                             const std::string& question_id, std::int64_t turn,
                                             const std::string& last_entity) const {
  auto it = policy.logits.find(state_key(question_id, turn, last_entity));
  if (it != policy.logits.end()) return it->second;
  return prior_logits(corpus_->question(question_id), turn, last_entity);
}

std::vector<DocumentId> SearchEnv::retrieve(const Question& q, const std::string& entity,
                                            std::mt19937_64& rng) const {
  auto it = corpus_->subject_index.find(entity);
  if (it == corpus_->subject_index.end()) return {};
  const FactDoc& hit = corpus_->facts[it->second];
  std::vector<DocumentId> docs{hit.doc_id};
  std::vector<DocumentId> pool;
  for (const DocumentId& d : q.distractor_docs) {
    if (d != hit.doc_id) pool.push_back(d);
  }
  const int extras = std::min<int>(kRetrievalDistractors, static_cast<int>(pool.size()));
  for (int j = 0; j < extras; ++j) {
    std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
    std::swap(pool[static_cast<std::size_t>(j)], pool[pick(rng)]);
    docs.push_back(pool[static_cast<std::size_t>(j)]);
  }
  return docs;
}

RolloutGroup SearchEnv::sample_group(const TabularPolicy& policy, const std::string& question_id,
                                     int group_size, std::mt19937_64& rng) const {
  const Question& q = corpus_->question(question_id);
  const auto& acts = actions(question_id);
  RolloutGroup group{question_id, q.question_text, q.chain.back(), {}};

  for (int g = 0; g < group_size; ++g) {
    RolloutTrace rollout;
    rollout.rollout_id = "r" + std::to_string(g);
    std::string last;
    for (std::int64_t turn = 0; turn <= config_.hops; ++turn) {
      const std::vector<double> logits = action_logits(policy, question_id, turn, last);
      const std::vector<double> pi = softmax(logits, config_.temperature);
      const std::size_t a = sample_categorical(pi, rng);
      const double action_lp = std::log(pi[a]);
      const int prefix = prepend_think_ ? config_.calibration.think_prefix_tokens : 0;
      // Every turn opens with a think tag; its tokens are counted whether the
      // harness supplied them or the policy generated them.
      const int lp_prefix = config_.calibration.think_prefix_tokens;

      Step step;
      step.index = turn;
      step.prefix_supplied = prefix > 0;
      switch (acts[a].type) {
        case Action::Type::kQuery: {
          step.kind = StepKind::kIntermediate;
          step.query_text = acts[a].entity;
          step.retrieved_docs = retrieve(q, acts[a].entity, rng);
          step.token_count = config_.token_model.query.tokens;
          step.token_logprobs = make_logprobs(config_.token_model.query, action_lp, lp_prefix,
                                              config_.token_model.prefix_logprob);
          if (!step.retrieved_docs.empty()) {
            last = corpus_->facts[corpus_->doc_index.at(step.retrieved_docs.front())].object;
          }
          rollout.steps.push_back(std::move(step));
          break;
        }
        case Action::Type::kGarbage: {
          step.kind = StepKind::kIntermediate;
          step.token_count = config_.token_model.garbage.tokens;
          step.token_logprobs = make_logprobs(config_.token_model.garbage, action_lp, lp_prefix,
                                              config_.token_model.prefix_logprob);
          rollout.steps.push_back(std::move(step));
          break;
        }
        case Action::Type::kAnswer: {
          step.kind = StepKind::kFinalAnswer;
          step.token_count = config_.token_model.answer.tokens;
          step.token_logprobs = make_logprobs(config_.token_model.answer, action_lp, lp_prefix,
                                              config_.token_model.prefix_logprob);
          rollout.steps.push_back(std::move(step));
          rollout.answer_text = acts[a].entity;
          break;
        }
      }
      if (!rollout.answer_text.empty()) break;
    }
    group.rollouts.push_back(std::move(rollout));
  }
  validate_group(group);
  return group;
}

std::vector<Visit> SearchEnv::replay(const RolloutTrace& trace,
                                     const std::string& question_id) const {
  auto table = action_lookup_.find(question_id);
  if (table == action_lookup_.end())
    throw std::invalid_argument("unknown question '" + question_id + "'");
  std::vector<Visit> visits;
  visits.reserve(trace.steps.size());
  std::string last;
  for (const Step& s : trace.steps) {
    std::string key;
    if (s.kind == StepKind::kFinalAnswer) {
      key = "a|" + trace.answer_text;
    } else if (s.query_text) {
      key = "q|" + *s.query_text;
    } else {
      key = "g|";
    }
    auto it = table->second.find(key);
    if (it == table->second.end())
      throw std::invalid_argument("rollout '" + trace.rollout_id +
                                  "' takes an action outside the question's action set");
    visits.push_back({state_key(question_id, s.index, last), it->second, s.index, last});
    if (s.kind == StepKind::kIntermediate && !s.retrieved_docs.empty()) {
      auto doc = corpus_->doc_index.find(s.retrieved_docs.front());
      if (doc == corpus_->doc_index.end())
        throw std::invalid_argument("rollout '" + trace.rollout_id +
                                    "' retrieved a document outside the corpus");
      last = corpus_->facts[doc->second].object;
    }
  }
  return visits;
}

void SearchEnv::policy_update(TabularPolicy& policy, const RolloutGroup& group,
                              const grpo::AdvantageAssignment& assignment, double lr) const {
  if (assignment.advantages.size() != group.rollouts.size() ||
      assignment.mask_tokens.size() != group.rollouts.size())
    throw std::invalid_argument("assignment shape does not match group");
  const Question& q = corpus_->question(group.question_id);

  // Batch semantics: every step's contribution is evaluated against the
  // pre-update policy, then the summed deltas land at once. Repeat visits to
  // one state within the group therefore see the same probabilities, and the
  // applied delta is the exact gradient of sum_s A_s * log pi(a_s | s).
  std::unordered_map<std::string, std::vector<double>> deltas;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const RolloutTrace& rollout = group.rollouts[i];
    if (assignment.advantages[i].size() != rollout.steps.size())
      throw std::invalid_argument("assignment step shape does not match group");
    const std::vector<Visit> visits = replay(rollout, group.question_id);
    for (std::size_t s = 0; s < visits.size(); ++s) {
      if (assignment.mask_tokens[i][s] == 0) continue;  // decoupled to nothing
      const double advantage = assignment.advantages[i][s];
      if (advantage == 0.0) continue;
      auto [it, inserted] = policy.logits.try_emplace(visits[s].state_key);
      if (inserted) it->second = prior_logits(q, visits[s].turn, visits[s].last_entity);
      const std::vector<double> pi = softmax(it->second, policy.temperature);
      std::vector<double>& delta =
          deltas.try_emplace(visits[s].state_key, pi.size(), 0.0).first->second;
      for (std::size_t b = 0; b < pi.size(); ++b) {
        const double indicator = b == visits[s].action_index ? 1.0 : 0.0;
        delta[b] += lr * advantage * (indicator - pi[b]);
      }
    }
  }
  for (const auto& [key, delta] : deltas) {
    std::vector<double>& logits = policy.logits.at(key);
    for (std::size_t b = 0; b < logits.size(); ++b) logits[b] += delta[b];
  }
}

namespace {

Pipeline pipeline_from_string(const std::string& s) {
  if (s == "baseline") return Pipeline::kBaseline;
  if (s == "calibadv") return Pipeline::kCalibAdv;
  throw std::invalid_argument("unknown pipeline '" + s + "' (expected baseline or calibadv)");
}

TokenProfile profile_from_json(const nlohmann::json& j) {
  TokenProfile p;
  if (j.contains("tokens")) p.tokens = j.at("tokens").get<int>();
  if (j.contains("filler_logprob")) p.filler_logprob = j.at("filler_logprob").get<double>();
  return p;
}

nlohmann::ordered_json profile_to_json(const TokenProfile& p) {
  return {{"tokens", p.tokens}, {"filler_logprob", p.filler_logprob}};
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& value) {
  if (j.contains(key)) value = j.at(key).get<T>();
}

}  // namespace

SimConfig sim_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "seed",          "group_size",   "questions_per_batch",
      "learning_rate", "updates",      "hops",
      "distractors",   "n_questions",  "temperature",
      "ppl_threshold", "token_model",  "policy_prior",
      "calibration",   "pipeline"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown config key '" + key + "'");
  }
  SimConfig c;
  read_if(j, "seed", c.seed);
  read_if(j, "group_size", c.group_size);
  read_if(j, "questions_per_batch", c.questions_per_batch);
  read_if(j, "learning_rate", c.learning_rate);
  read_if(j, "updates", c.updates);
  read_if(j, "hops", c.hops);
  read_if(j, "distractors", c.distractors);
  read_if(j, "n_questions", c.n_questions);
  read_if(j, "temperature", c.temperature);
  read_if(j, "ppl_threshold", c.ppl_threshold);
  if (j.contains("token_model")) {
    const auto& tm = j.at("token_model");
    if (tm.contains("query")) c.token_model.query = profile_from_json(tm.at("query"));
    if (tm.contains("answer")) c.token_model.answer = profile_from_json(tm.at("answer"));
    if (tm.contains("garbage")) c.token_model.garbage = profile_from_json(tm.at("garbage"));
    if (tm.contains("prefix_logprob"))
      c.token_model.prefix_logprob = tm.at("prefix_logprob").get<double>();
  }
  if (j.contains("policy_prior")) {
    const auto& pp = j.at("policy_prior");
    read_if(pp, "query_bias", c.policy_prior.query_bias);
    read_if(pp, "answer_bias", c.policy_prior.answer_bias);
    read_if(pp, "follow_bias", c.policy_prior.follow_bias);
  }
  if (j.contains("calibration")) {
    const auto& cj = j.at("calibration");
    read_if(cj, "lambda", c.calibration.lambda);
    read_if(cj, "correctness_threshold", c.calibration.correctness_threshold);
    read_if(cj, "eps", c.calibration.eps);
    read_if(cj, "enable_soft_penalty", c.calibration.enable_soft_penalty);
    read_if(cj, "enable_rebalance", c.calibration.enable_rebalance);
    read_if(cj, "enable_decouple_think", c.calibration.enable_decouple_think);
    read_if(cj, "think_prefix_tokens", c.calibration.think_prefix_tokens);
  }
  if (j.contains("pipeline")) c.pipeline = pipeline_from_string(j.at("pipeline").get<std::string>());
  c.validate();
  return c;
}

SimConfig load_sim_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("config: ") + e.what());
  }
  return sim_config_from_json(j);
}

nlohmann::ordered_json sim_config_to_json(const SimConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["group_size"] = c.group_size;
  j["questions_per_batch"] = c.questions_per_batch;
  j["learning_rate"] = c.learning_rate;
  j["updates"] = c.updates;
  j["hops"] = c.hops;
  j["distractors"] = c.distractors;
  j["n_questions"] = c.n_questions;
  j["temperature"] = c.temperature;
  j["ppl_threshold"] = c.ppl_threshold;
  j["token_model"] = {{"query", profile_to_json(c.token_model.query)},
                      {"answer", profile_to_json(c.token_model.answer)},
                      {"garbage", profile_to_json(c.token_model.garbage)},
                      {"prefix_logprob", c.token_model.prefix_logprob}};
  j["policy_prior"] = {{"query_bias", c.policy_prior.query_bias},
                       {"answer_bias", c.policy_prior.answer_bias},
                       {"follow_bias", c.policy_prior.follow_bias}};
  j["calibration"] = {{"lambda", c.calibration.lambda},
                      {"correctness_threshold", c.calibration.correctness_threshold},
                      {"eps", c.calibration.eps},
                      {"enable_soft_penalty", c.calibration.enable_soft_penalty},
                      {"enable_rebalance", c.calibration.enable_rebalance},
                      {"enable_decouple_think", c.calibration.enable_decouple_think},
                      {"think_prefix_tokens", c.calibration.think_prefix_tokens}};
  j["pipeline"] = c.pipeline == Pipeline::kBaseline ? "baseline" : "calibadv";
  return j;
}

SimResult run_experiment(const SimConfig& config) {
  config.validate();
  const SyntheticCorpus corpus =
      generate_corpus(config.seed, config.n_questions, config.hops, config.distractors);
  const SearchEnv env(corpus, config);

  SimResult result;
  result.final_policy.temperature = config.temperature;
  TabularPolicy& policy = result.final_policy;

  // Each update draws from an identically seeded stream: with a zero learning
  // rate every batch replays the same trajectories and telemetry stays flat.
  const std::uint64_t stream_seed = splitmix64(config.seed ^ 0xA5A5A5A5A5A5A5A5ull);

  for (int t = 0; t < config.updates; ++t) {
    std::mt19937_64 rng(stream_seed);

    std::vector<RolloutGroup> batch;
    batch.reserve(static_cast<std::size_t>(config.questions_per_batch));
    for (int b = 0; b < config.questions_per_batch; ++b) {
      const std::size_t qi = static_cast<std::size_t>(
          (static_cast<long long>(t) * config.questions_per_batch + b) % config.n_questions);
      batch.push_back(
          env.sample_group(policy, corpus.questions[qi].question_id, config.group_size, rng));
    }

    std::vector<grpo::AdvantageAssignment> baseline;
    std::vector<grpo::AdvantageAssignment> applied;
    double success_sum = 0.0;
    std::size_t rollout_count = 0;
    for (const RolloutGroup& group : batch) {
      std::vector<double> finals;
      finals.reserve(group.rollouts.size());
      for (const RolloutTrace& r : group.rollouts) {
        const auto rb = rewards::final_reward(r, group.reference_answer);
        finals.push_back(rb.r_final);
        success_sum += rb.r_final;
        ++rollout_count;
      }
      baseline.push_back(grpo::broadcast(
          group, grpo::group_relative_advantages(finals, config.calibration.eps)));
      if (config.pipeline == Pipeline::kCalibAdv) {
        applied.push_back(calibration::calibrate_group(group, config.calibration).assignment);
      } else {
        applied.push_back(baseline.back());
      }
    }

    // Telemetry is measured against the policy the batch was sampled from.
    analysis::TelemetryRecord record;
    record.training_step = t;
    double entropy_sum = 0.0;
    double garbage_sum = 0.0;
    std::size_t visit_count = 0;
    double nll_sum = 0.0;
    std::int64_t token_sum = 0;
    std::size_t high_ppl = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const RolloutGroup& group = batch[b];
      const auto& acts = env.actions(group.question_id);
      const std::size_t garbage_index = acts.size() - 1;
      for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
        const RolloutTrace& rollout = group.rollouts[i];
        for (const Visit& v : env.replay(rollout, group.question_id)) {
          const std::vector<double> pi = softmax(
              env.action_logits(policy, group.question_id, v.turn, v.last_entity),
              config.temperature);
          entropy_sum += entropy(pi);
          garbage_sum += pi[garbage_index];
          ++visit_count;
        }
        const auto& masks = applied[b].mask_tokens[i];
        for (std::size_t s = 0; s < rollout.steps.size(); ++s) {
          const std::int64_t m =
              std::clamp<std::int64_t>(masks[s], 0, rollout.steps[s].token_count);
          const auto& lps = *rollout.steps[s].token_logprobs;
          for (std::int64_t k = 0; k < m; ++k) nll_sum -= lps[static_cast<std::size_t>(k)];
          token_sum += m;
        }
        if (analysis::rollout_perplexity(rollout, applied[b].mask_tokens[i]) >
            config.ppl_threshold)
          ++high_ppl;
      }
    }
    record.mean_token_nll = token_sum > 0 ? nll_sum / static_cast<double>(token_sum) : 0.0;
    record.perplexity = std::exp(record.mean_token_nll);
    record.neg_pos_ratio = analysis::neg_pos_ratio(applied);
    record.high_ppl_ratio =
        rollout_count > 0 ? static_cast<double>(high_ppl) / static_cast<double>(rollout_count)
                          : 0.0;
    record.mispenalty_by_step = analysis::mispenalty_rate_serial(batch, baseline,
                                                                 config.calibration);
    record.policy_entropy = visit_count > 0 ? entropy_sum / static_cast<double>(visit_count) : 0.0;
    record.success_rate =
        rollout_count > 0 ? success_sum / static_cast<double>(rollout_count) : 0.0;
    record.garbage_mass = visit_count > 0 ? garbage_sum / static_cast<double>(visit_count) : 0.0;
    result.telemetry.push_back(std::move(record));

    for (std::size_t b = 0; b < batch.size(); ++b)
      env.policy_update(policy, batch[b], applied[b], config.learning_rate);

    for (RolloutGroup& group : batch) result.trace_archive.push_back(std::move(group));
  }
  return result;
}

}  // namespace calibadv::sim
