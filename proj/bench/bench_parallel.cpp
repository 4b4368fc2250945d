// SPDX-License-Identifier: Apache-2.0
//
// Compares the OpenMP batch kernels against their serial references on a
// synthetic workload and verifies both produce identical output.
//
//   calibadv_bench [n_groups] [repeats]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <vector>

#include "calibadv/analysis.hpp"
#include "calibadv/calibration.hpp"
#include "calibadv/simulator.hpp"
#include "calibadv/threading.hpp"
#include "calibadv/trace.hpp"

using namespace calibadv;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Trace corpus drawn from the simulator so the workload matches real use.
std::vector<RolloutGroup> make_workload(int n_groups) {
  sim::SimConfig cfg;
  cfg.seed = 97;
  cfg.group_size = 6;
  cfg.hops = 3;
  cfg.distractors = 4;
  cfg.n_questions = 64;
  const sim::SyntheticCorpus corpus =
      sim::generate_corpus(cfg.seed, cfg.n_questions, cfg.hops, cfg.distractors);
  const sim::SearchEnv env(corpus, cfg);
  const sim::TabularPolicy policy;
  std::mt19937_64 rng(cfg.seed);
  std::vector<RolloutGroup> groups;
  groups.reserve(static_cast<std::size_t>(n_groups));
  for (int i = 0; i < n_groups; ++i) {
    const auto& q = corpus.questions[static_cast<std::size_t>(i) % corpus.questions.size()];
    groups.push_back(env.sample_group(policy, q.question_id, cfg.group_size, rng));
  }
  return groups;
}

template <typename Fn>
double best_of(int repeats, Fn&& fn) {
  double best = 1e300;
  for (int i = 0; i < repeats; ++i) {
    const double t0 = now_seconds();
    fn();
    best = std::min(best, now_seconds() - t0);
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  const int n_groups = argc > 1 ? std::atoi(argv[1]) : 20000;
  const int repeats = argc > 2 ? std::atoi(argv[2]) : 3;
  const std::vector<RolloutGroup> groups = make_workload(n_groups);
  const calibration::CalibrationConfig cfg;

  std::printf("workload: %d groups, %d threads available, best of %d runs\n", n_groups,
              max_parallelism(), repeats);

  std::vector<calibration::GroupCalibration> serial_out;
  std::vector<calibration::GroupCalibration> parallel_out;
  const double t_serial = best_of(
      repeats, [&] { serial_out = calibration::calibrate_groups_serial(groups, cfg); });
  const double t_parallel =
      best_of(repeats, [&] { parallel_out = calibration::calibrate_groups(groups, cfg); });

  bool equal = serial_out.size() == parallel_out.size();
  for (std::size_t i = 0; equal && i < serial_out.size(); ++i)
    equal = serial_out[i].assignment == parallel_out[i].assignment;
  std::printf("calibrate_groups   serial %8.4fs  parallel %8.4fs  speedup %5.2fx  %s\n",
              t_serial, t_parallel, t_serial / t_parallel,
              equal ? "outputs identical" : "OUTPUT MISMATCH");

  std::vector<grpo::AdvantageAssignment> assignments;
  assignments.reserve(serial_out.size());
  for (const auto& r : serial_out) assignments.push_back(r.assignment);

  std::vector<analysis::StepMispenalty> mis_serial;
  std::vector<analysis::StepMispenalty> mis_parallel;
  const double m_serial = best_of(
      repeats, [&] { mis_serial = analysis::mispenalty_rate_serial(groups, assignments, cfg); });
  const double m_parallel = best_of(
      repeats, [&] { mis_parallel = analysis::mispenalty_rate(groups, assignments, cfg); });
  std::printf("mispenalty_rate    serial %8.4fs  parallel %8.4fs  speedup %5.2fx  %s\n",
              m_serial, m_parallel, m_serial / m_parallel,
              mis_serial == mis_parallel ? "outputs identical" : "OUTPUT MISMATCH");

  std::vector<std::string> lines;
  lines.reserve(groups.size());
  for (const RolloutGroup& g : groups) lines.push_back(serialize_group(g));
  std::vector<RolloutGroup> parsed;
  const double p_parallel = best_of(repeats, [&] { parsed = parse_trace_lines(lines); });
  setenv("CALIBADV_THREADS", "1", 1);
  std::vector<RolloutGroup> parsed_serial;
  const double p_serial = best_of(repeats, [&] { parsed_serial = parse_trace_lines(lines); });
  unsetenv("CALIBADV_THREADS");
  std::printf("parse_trace_lines  serial %8.4fs  parallel %8.4fs  speedup %5.2fx  %s\n",
              p_serial, p_parallel, p_serial / p_parallel,
              parsed == parsed_serial ? "outputs identical" : "OUTPUT MISMATCH");

  const bool all_equal = equal && mis_serial == mis_parallel && parsed == parsed_serial;
  return all_equal ? 0 : 1;
}
