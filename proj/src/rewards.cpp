// SPDX-License-Identifier: Apache-2.0

#include "calibadv/rewards.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace calibadv::rewards {

namespace {

bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

}  // namespace

std::int64_t WordBag::total() const {
  std::int64_t n = 0;
  for (const auto& [word, count] : counts) n += count;
  return n;
}

WordBag normalize_words(std::string_view text, const NormalizeOptions& opts) {
  WordBag bag;
  std::string word;
  auto flush = [&] {
    if (!word.empty() && !(opts.drop_articles && is_article(word))) ++bag.counts[word];
    word.clear();
  };
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
      continue;
    }
    if (opts.strip_punctuation && c < 0x80 && std::ispunct(c)) continue;
    word.push_back(opts.lowercase && c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  flush();
  return bag;
}

double answer_f1(const WordBag& predicted, const WordBag& reference) {
  const std::int64_t pn = predicted.total();
  const std::int64_t rn = reference.total();
  if (pn + rn == 0) return 0.0;
  std::int64_t in = 0;
  for (const auto& [word, count] : predicted.counts) {
    auto it = reference.counts.find(word);
    if (it != reference.counts.end()) in += std::min(count, it->second);
  }
  if (in == 0) return 0.0;
  return 2.0 * static_cast<double>(in) / static_cast<double>(pn + rn);
}

namespace {

// The tag inventory of the deep-search response grammar.
enum class Tag {
  kThinkOpen,
  kThinkClose,
  kSearchOpen,
  kSearchClose,
  kInfoOpen,
  kInfoClose,
  kAnswerOpen,
  kAnswerClose,
};

struct TagSpec {
  Tag tag;
  std::string_view text;
};

constexpr std::array<TagSpec, 8> kTags = {{
    {Tag::kThinkOpen, "<think>"},
    {Tag::kThinkClose, "</think>"},
    {Tag::kSearchOpen, "<search>"},
    {Tag::kSearchClose, "</search>"},
    {Tag::kInfoOpen, "<information>"},
    {Tag::kInfoClose, "</information>"},
    {Tag::kAnswerOpen, "<answer>"},
    {Tag::kAnswerClose, "</answer>"},
}};

struct TagHit {
  std::size_t pos = std::string_view::npos;
  Tag tag = Tag::kThinkOpen;
  std::size_t length = 0;
};

// First inventory tag at or after `from`. Other uses of '<' are plain text.
TagHit next_tag(std::string_view s, std::size_t from) {
  for (std::size_t i = from; i < s.size(); ++i) {
    if (s[i] != '<') continue;
    for (const TagSpec& spec : kTags) {
      if (s.substr(i, spec.text.size()) == spec.text)
        return {i, spec.tag, spec.text.size()};
    }
  }
  return {};
}

bool whitespace_only(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) {
    const unsigned char u = static_cast<unsigned char>(c);
    return u < 0x80 && std::isspace(u);
  });
}

// Cursor over "block, whitespace, block, ..." structure.
struct Scanner {
  std::string_view s;
  std::size_t pos = 0;

  // Peeks the next tag; fails if non-whitespace text precedes it.
  bool peek(TagHit& hit) const {
    TagHit h = next_tag(s, pos);
    if (h.pos == std::string_view::npos) return false;
    if (!whitespace_only(s.substr(pos, h.pos - pos))) return false;
    hit = h;
    return true;
  }

  // Consumes `<tag> content </tag>` where content holds no inventory tag.
  bool consume_block(Tag open, Tag close) {
    TagHit h;
    if (!peek(h) || h.tag != open) return false;
    const std::size_t content_start = h.pos + h.length;
    TagHit c = next_tag(s, content_start);
    if (c.pos == std::string_view::npos || c.tag != close) return false;
    pos = c.pos + c.length;
    return true;
  }

  bool at_end() const {
    return next_tag(s, pos).pos == std::string_view::npos &&
           whitespace_only(s.substr(pos));
  }
};

}  // namespace

int check_format(std::string_view raw_response) {
  Scanner sc{raw_response};
  while (true) {
    if (!sc.consume_block(Tag::kThinkOpen, Tag::kThinkClose)) return 0;
    TagHit h;
    if (!sc.peek(h)) return 0;  // a turn must continue with search or answer
    if (h.tag == Tag::kAnswerOpen) {
      if (!sc.consume_block(Tag::kAnswerOpen, Tag::kAnswerClose)) return 0;
      return sc.at_end() ? 1 : 0;  // exactly one answer block, nothing after
    }
    if (h.tag != Tag::kSearchOpen) return 0;
    if (!sc.consume_block(Tag::kSearchOpen, Tag::kSearchClose)) return 0;
    if (sc.peek(h) && h.tag == Tag::kInfoOpen) {
      if (!sc.consume_block(Tag::kInfoOpen, Tag::kInfoClose)) return 0;
    }
  }
}

RewardBreakdown final_reward(const RolloutTrace& trace, std::string_view reference_answer,
                             const NormalizeOptions& opts) {
  RewardBreakdown out;
  out.r_answer = answer_f1(normalize_words(trace.answer_text, opts),
                           normalize_words(reference_answer, opts));
  if (trace.raw_response) {
    out.r_format = check_format(*trace.raw_response);
  } else {
    out.r_format = trace.final_step() != nullptr ? 1 : 0;
  }
  out.r_final = out.r_answer * out.r_format;
  return out;
}

}  // namespace calibadv::rewards
