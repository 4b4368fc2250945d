// SPDX-License-Identifier: Apache-2.0
//
// Gated F1 + format reward for deep-search rollouts.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "calibadv/trace.hpp"

namespace calibadv::rewards {

// Word normalization knobs. Defaults follow standard QA token-F1 practice:
// ASCII lowercase, strip ASCII punctuation, drop the articles {a, an, the},
// split on whitespace.
struct NormalizeOptions {
  bool lowercase = true;
  bool strip_punctuation = true;
  bool drop_articles = true;
};

// Multiset of normalized words.
struct WordBag {
  std::map<std::string, std::int64_t> counts;

  std::int64_t total() const;
  bool operator==(const WordBag&) const = default;
};

struct RewardBreakdown {
  double r_answer = 0.0;  // word-level F1 in [0,1]
  int r_format = 0;       // {0,1}
  double r_final = 0.0;   // r_answer * r_format, exactly

  bool operator==(const RewardBreakdown&) const = default;
};

WordBag normalize_words(std::string_view text, const NormalizeOptions& opts = {});

// 2*IN / (PN+RN) with multiset (min-count) intersection; 0 when either
// side is empty or the intersection is.
double answer_f1(const WordBag& predicted, const WordBag& reference);

// 1 iff the response is a sequence of turns, each opening with a well-nested
// think block, every intermediate turn followed by exactly one search block
// (optionally one information block), and the final turn closing with exactly
// one answer block. Only whitespace is allowed between blocks and no tag from
// the inventory may appear inside another block.
int check_format(std::string_view raw_response);

// r_format comes from check_format when raw_response is present; otherwise it
// is inferred structurally (1 iff the trace ends in a final_answer step).
RewardBreakdown final_reward(const RolloutTrace& trace, std::string_view reference_answer,
                             const NormalizeOptions& opts = {});

}  // namespace calibadv::rewards
