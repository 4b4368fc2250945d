// SPDX-License-Identifier: Apache-2.0

#include "calibadv/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace calibadv::grpo {

std::vector<double> group_relative_advantages(std::span<const double> rewards, double eps) {
  const std::size_t g = rewards.size();
  if (g < 2) throw std::invalid_argument("group-relative advantages need G >= 2 rewards");
  if (eps < 0.0) throw std::invalid_argument("eps must be >= 0");

  if (std::all_of(rewards.begin(), rewards.end(),
                  [&](double r) { return r == rewards.front(); }))
    return std::vector<double>(g, 0.0);

  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(g);  // population variance
  const double denom = std::sqrt(var) + eps;

  std::vector<double> out(g);
  for (std::size_t i = 0; i < g; ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

AdvantageAssignment broadcast(const RolloutGroup& group,
                              std::span<const double> rollout_advantages) {
  if (group.rollouts.size() != rollout_advantages.size())
    throw std::invalid_argument("advantage count does not match rollout count");
  AdvantageAssignment out;
  out.advantages.reserve(group.rollouts.size());
  out.mask_tokens.reserve(group.rollouts.size());
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const RolloutTrace& r = group.rollouts[i];
    out.advantages.emplace_back(r.steps.size(), rollout_advantages[i]);
    std::vector<std::int64_t> masks;
    masks.reserve(r.steps.size());
    for (const Step& s : r.steps) masks.push_back(s.token_count);
    out.mask_tokens.push_back(std::move(masks));
  }
  return out;
}

}  // namespace calibadv::grpo
