// SPDX-License-Identifier: Apache-2.0

#include "calibadv/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>

#include <doctest.h>

#include "calibadv/errors.hpp"
#include "support/random_groups.hpp"

using namespace calibadv;
using namespace calibadv::calibration;
namespace fs = std::filesystem;

namespace {

Step intermediate(std::int64_t index, std::vector<DocumentId> docs, std::int64_t tokens) {
  Step s;
  s.index = index;
  s.retrieved_docs = std::move(docs);
  s.token_count = tokens;
  return s;
}

Step final_answer(std::int64_t index, std::int64_t tokens) {
  Step s;
  s.index = index;
  s.kind = StepKind::kFinalAnswer;
  s.token_count = tokens;
  return s;
}

RolloutTrace rollout(std::string id, std::vector<Step> steps, std::string answer = "") {
  RolloutTrace r;
  r.rollout_id = std::move(id);
  r.steps = std::move(steps);
  r.answer_text = std::move(answer);
  return r;
}

// One correct rollout, two wrong ones, one of which shares a retrieved
// document with the correct rollout.
RolloutGroup hand_group() {
  RolloutGroup g;
  g.question_id = "q";
  g.question_text = "who";
  g.reference_answer = "gold";
  g.rollouts = {
      rollout("r0", {intermediate(0, {"d1"}, 8), final_answer(1, 10)}, "gold"),
      rollout("r1", {intermediate(0, {"d1", "dx"}, 8), final_answer(1, 4)}, "junk"),
      rollout("r2", {intermediate(0, {"dy"}, 8), final_answer(1, 6)}, "other"),
  };
  return g;
}

std::vector<rewards::RewardBreakdown> reward_all(const RolloutGroup& g) {
  std::vector<rewards::RewardBreakdown> out;
  for (const RolloutTrace& r : g.rollouts)
    out.push_back(rewards::final_reward(r, g.reference_answer));
  return out;
}

}  // namespace

TEST_SUITE("calibration") {

TEST_CASE("config invariants are enforced") {
  CalibrationConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.correctness_threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.correctness_threshold = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.eps = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.think_prefix_tokens = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("silver documents union over correct rollouts") {
  const RolloutGroup g = hand_group();
  const auto rewards = reward_all(g);

  SUBCASE("threshold met by one rollout") {
    const SilverDocSet silver = silver_documents(g, rewards, 0.5);
    CHECK(silver.docs == std::set<DocumentId>{"d1"});
    CHECK(silver.source_rollout_count == 1);
  }
  SUBCASE("no rollout meets an impossible threshold") {
    RolloutGroup none = g;
    none.rollouts[0].answer_text = "junk2";
    const SilverDocSet silver = silver_documents(none, reward_all(none), 0.5);
    CHECK(silver.docs.empty());
    CHECK(silver.source_rollout_count == 0);
  }
  SUBCASE("two correct rollouts merge their doc sets") {
    RolloutGroup two = g;
    two.rollouts[1].answer_text = "gold";
    two.rollouts[1].steps[0].retrieved_docs = {"d2", "d3"};
    const SilverDocSet silver = silver_documents(two, reward_all(two), 0.5);
    CHECK(silver.docs == std::set<DocumentId>{"d1", "d2", "d3"});
    CHECK(silver.source_rollout_count == 2);
  }
  SUBCASE("correct rollout with no retrievals contributes its count only") {
    RolloutGroup empty = g;
    empty.rollouts[0].steps[0].retrieved_docs.clear();
    const SilverDocSet silver = silver_documents(empty, reward_all(empty), 0.5);
    CHECK(silver.docs.empty());
    CHECK(silver.source_rollout_count == 1);
  }
  SUBCASE("misaligned reward list is rejected") {
    std::vector<rewards::RewardBreakdown> wrong(rewards.begin(), rewards.end() - 1);
    CHECK_THROWS_AS(silver_documents(g, wrong, 0.5), std::invalid_argument);
  }
}

TEST_CASE("step correctness is the silver fraction of distinct docs") {
  SilverDocSet silver;
  silver.docs = {"a", "b", "c"};
  CHECK(step_correctness(intermediate(0, {"a", "b", "c"}, 1), silver) == 1.0);
  CHECK(step_correctness(intermediate(0, {"a", "x", "y"}, 1), silver) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(step_correctness(intermediate(0, {}, 1), silver) == 0.0);
  CHECK(step_correctness(intermediate(0, {"a", "a", "x"}, 1), silver) == 0.5);  // distinct docs
  CHECK_THROWS_AS(step_correctness(final_answer(0, 1), silver), std::invalid_argument);
}

TEST_CASE("soft penalization shrinks negatives and leaves the rest alone") {
  CHECK(soft_penalize(-1.0, 1.0) == 0.0);
  CHECK(soft_penalize(-1.0, 0.5) == -0.5);
  CHECK(soft_penalize(0.8, 0.9) == 0.8);
  CHECK(soft_penalize(0.0, 0.3) == 0.0);
  CHECK_THROWS_AS(soft_penalize(-1.0, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(soft_penalize(-1.0, -0.1), std::invalid_argument);

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> adv(-3.0, 3.0);
  std::uniform_real_distribution<double> cs(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = adv(rng);
    const double c = cs(rng);
    const double out = soft_penalize(a, c);
    CHECK(std::abs(out) <= std::abs(a));
    CHECK(out * a >= 0.0);  // sign preserved (or zeroed)
    if (a >= 0.0) CHECK(out == a);
    if (a < 0.0) CHECK(out == a * (1.0 - c));
  }
  // monotone nonincreasing magnitude in c for a fixed negative advantage
  for (double c = 0.125; c <= 1.0; c += 0.125) {
    CHECK(std::abs(soft_penalize(-2.0, c)) <= std::abs(soft_penalize(-2.0, c - 0.125)));
  }
}

TEST_CASE("rebalance equalizes token-weighted magnitudes at the final step") {
  // positives token-weighted 2.0, negatives 3.0 -> scale 1.5
  RolloutGroup g;
  g.question_id = "q";
  g.reference_answer = "a";
  g.rollouts = {rollout("r0", {final_answer(0, 2)}, "a"),
                rollout("r1", {final_answer(0, 3)}, "b")};
  grpo::AdvantageAssignment assignment;
  assignment.advantages = {{1.0}, {-1.0}};
  assignment.mask_tokens = {{2}, {3}};
  const auto out = rebalance_final(assignment, g, 1.0);
  CHECK(out.advantages[0][0] == 1.5);
  CHECK(out.advantages[1][0] == -1.0);

  SUBCASE("lambda scales the restored positive mass") {
    const auto half = rebalance_final(assignment, g, 0.5);
    CHECK(half.advantages[0][0] == 0.75);
    const auto twice = rebalance_final(assignment, g, 2.0);
    CHECK(twice.advantages[0][0] == 3.0);
  }
}

TEST_CASE("rebalance edge rules leave one-sided groups untouched") {
  RolloutGroup g;
  g.question_id = "q";
  g.reference_answer = "a";
  g.rollouts = {rollout("r0", {final_answer(0, 2)}, "a"),
                rollout("r1", {final_answer(0, 3)}, "b")};

  grpo::AdvantageAssignment all_neg;
  all_neg.advantages = {{-0.5}, {-1.0}};
  all_neg.mask_tokens = {{2}, {3}};
  CHECK(rebalance_final(all_neg, g, 1.0) == all_neg);

  grpo::AdvantageAssignment all_pos;
  all_pos.advantages = {{0.5}, {1.0}};
  all_pos.mask_tokens = {{2}, {3}};
  CHECK(rebalance_final(all_pos, g, 2.0) == all_pos);  // no negatives: unchanged, lambda inert

  grpo::AdvantageAssignment wrong_shape;
  wrong_shape.advantages = {{0.5}};
  wrong_shape.mask_tokens = {{2}};
  CHECK_THROWS_AS(rebalance_final(wrong_shape, g, 1.0), std::invalid_argument);
}

TEST_CASE("rebalance never touches intermediate steps or rollouts without a final step") {
  RolloutGroup g;
  g.question_id = "q";
  g.reference_answer = "a";
  g.rollouts = {
      rollout("r0", {intermediate(0, {"d"}, 5), final_answer(1, 2)}, "a"),
      rollout("r1", {intermediate(0, {"d"}, 5), final_answer(1, 3)}, "b"),
      rollout("r2", {intermediate(0, {}, 7)}),  // ran out of turns
  };
  grpo::AdvantageAssignment assignment;
  assignment.advantages = {{1.0, 1.0}, {-1.0, -1.0}, {-1.0}};
  assignment.mask_tokens = {{5, 2}, {5, 3}, {7}};
  const auto out = rebalance_final(assignment, g, 1.0);
  CHECK(out.advantages[0][0] == 1.0);
  CHECK(out.advantages[1][0] == -1.0);
  CHECK(out.advantages[2][0] == -1.0);  // last step is not a final_answer step
  CHECK(out.advantages[0][1] == 1.5);
  CHECK(out.mask_tokens == assignment.mask_tokens);
}

TEST_CASE("decouple trims masks on prefix-supplied steps only") {
  RolloutGroup g;
  g.question_id = "q";
  g.reference_answer = "a";
  Step supplied = intermediate(0, {}, 10);
  supplied.prefix_supplied = true;
  Step tiny = intermediate(0, {}, 1);
  tiny.prefix_supplied = true;
  g.rollouts = {rollout("r0", {supplied}), rollout("r1", {intermediate(0, {}, 10)}),
                rollout("r2", {tiny})};
  grpo::AdvantageAssignment assignment;
  assignment.advantages = {{0.4}, {0.4}, {0.4}};
  assignment.mask_tokens = {{10}, {10}, {1}};
  const auto out = decouple_think(assignment, g, 2);
  CHECK(out.mask_tokens[0][0] == 8);
  CHECK(out.mask_tokens[1][0] == 10);
  CHECK(out.mask_tokens[2][0] == 0);  // floored at zero
  CHECK(out.advantages == assignment.advantages);
}

TEST_CASE("calibrate_group matches the frozen hand trace") {
  const RolloutGroup g = hand_group();
  CalibrationConfig cfg;  // defaults: lambda 1, threshold 0.5, eps 1e-6
  const GroupCalibration out = calibrate_group(g, cfg);

  CHECK(out.rewards[0].r_final == 1.0);
  CHECK(out.rewards[1].r_final == 0.0);
  CHECK(out.rewards[2].r_final == 0.0);
  CHECK(out.silver.docs == std::set<DocumentId>{"d1"});

  // Values derived by hand from the definitions, frozen before implementation:
  // A0 = (2/3)/(sqrt(2)/3 + 1e-6), A1 = A2 = -(1/3)/(sqrt(2)/3 + 1e-6);
  // r1 step0 shares d1 with the correct rollout -> c_s = 1/2;
  // rebalance with final masks (10, 4, 6) scales A0 by 1/2.
  const double kA1 = -0.7071052811897295;
  CHECK(out.assignment.advantages[0][1] == doctest::Approx(0.7071052811897295).epsilon(1e-12));
  CHECK(out.assignment.advantages[0][0] ==
        doctest::Approx(1.4142105623794592).epsilon(1e-12));  // positives untouched by soft pen
  CHECK(out.assignment.advantages[1][0] ==
        doctest::Approx(-0.35355264059486474).epsilon(1e-12));
  CHECK(out.assignment.advantages[1][1] == doctest::Approx(kA1).epsilon(1e-12));
  CHECK(out.assignment.advantages[2][0] == doctest::Approx(kA1).epsilon(1e-12));
  CHECK(out.assignment.advantages[2][1] == doctest::Approx(kA1).epsilon(1e-12));

  // token-weighted positive and negative magnitudes agree at the final step
  const double pos = out.assignment.advantages[0][1] * 10.0;
  const double neg = -out.assignment.advantages[1][1] * 4.0 - out.assignment.advantages[2][1] * 6.0;
  CHECK(pos == doctest::Approx(neg).epsilon(1e-12));
}

TEST_CASE("disabled stages reproduce the broadcast baseline bit for bit") {
  std::mt19937_64 rng(31);
  CalibrationConfig cfg;
  cfg.enable_soft_penalty = false;
  cfg.enable_rebalance = false;
  cfg.enable_decouple_think = false;
  for (int i = 0; i < 50; ++i) {
    const RolloutGroup g = testing::random_group(rng);
    std::vector<double> finals;
    for (const RolloutTrace& r : g.rollouts)
      finals.push_back(rewards::final_reward(r, g.reference_answer).r_final);
    const auto baseline = grpo::broadcast(g, grpo::group_relative_advantages(finals, cfg.eps));
    CHECK(calibrate_group(g, cfg).assignment == baseline);
  }
}

TEST_CASE("all-correct groups are a calibration fixpoint") {
  RolloutGroup g = hand_group();
  for (RolloutTrace& r : g.rollouts) r.answer_text = "gold";
  const GroupCalibration out = calibrate_group(g, CalibrationConfig{});
  for (const auto& per_rollout : out.assignment.advantages) {
    for (double a : per_rollout) CHECK(a == 0.0);
  }
}

TEST_CASE("calibration commutes with rollout permutation") {
  std::mt19937_64 rng(77);
  CalibrationConfig cfg;
  for (int i = 0; i < 40; ++i) {
    RolloutGroup g = testing::random_group(rng);
    const GroupCalibration base = calibrate_group(g, cfg);
    std::vector<std::size_t> perm(g.rollouts.size());
    for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = k;
    std::shuffle(perm.begin(), perm.end(), rng);
    RolloutGroup shuffled = g;
    for (std::size_t k = 0; k < perm.size(); ++k) shuffled.rollouts[k] = g.rollouts[perm[k]];
    const GroupCalibration moved = calibrate_group(shuffled, cfg);
    CHECK(moved.silver.docs == base.silver.docs);
    for (std::size_t k = 0; k < perm.size(); ++k) {
      REQUIRE(moved.assignment.advantages[k].size() ==
              base.assignment.advantages[perm[k]].size());
      for (std::size_t s = 0; s < moved.assignment.advantages[k].size(); ++s) {
        CHECK(moved.assignment.advantages[k][s] ==
              doctest::Approx(base.assignment.advantages[perm[k]][s]).epsilon(1e-9));
        CHECK(moved.assignment.mask_tokens[k][s] == base.assignment.mask_tokens[perm[k]][s]);
      }
    }
  }
}

TEST_CASE("batch calibration: parallel kernel equals the serial reference") {
  std::mt19937_64 rng(4242);
  std::vector<RolloutGroup> groups;
  for (int i = 0; i < 120; ++i) groups.push_back(testing::random_group(rng));
  CalibrationConfig cfg;
  const auto parallel = calibrate_groups(groups, cfg);
  const auto serial = calibrate_groups_serial(groups, cfg);
  REQUIRE(parallel.size() == serial.size());
  for (std::size_t i = 0; i < parallel.size(); ++i) {
    CHECK(parallel[i].assignment == serial[i].assignment);
    CHECK(parallel[i].silver.docs == serial[i].silver.docs);
  }

  setenv("CALIBADV_THREADS", "3", 1);
  const auto capped = calibrate_groups(groups, cfg);
  unsetenv("CALIBADV_THREADS");
  for (std::size_t i = 0; i < capped.size(); ++i)
    CHECK(capped[i].assignment == serial[i].assignment);
}

TEST_CASE("assignment files round-trip groups and assignments") {
  std::mt19937_64 rng(8);
  std::vector<RolloutGroup> groups;
  for (int i = 0; i < 10; ++i) groups.push_back(testing::random_group(rng));
  const auto results = calibrate_groups(groups, CalibrationConfig{});
  std::vector<grpo::AdvantageAssignment> assignments;
  for (const auto& r : results) assignments.push_back(r.assignment);

  const fs::path path = fs::temp_directory_path() / "calibadv_assignments.jsonl";
  write_assignment_file(groups, assignments, path);
  const auto [back_groups, back_assignments] = parse_assignment_file(path);
  CHECK(back_groups == groups);
  REQUIRE(back_assignments.size() == assignments.size());
  for (std::size_t i = 0; i < assignments.size(); ++i)
    CHECK(back_assignments[i] == assignments[i]);
  fs::remove(path);
}

}  // TEST_SUITE
