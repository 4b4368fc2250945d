// SPDX-License-Identifier: Apache-2.0
//
// calibadv CLI: calibrate traces, analyze mis-penalization and telemetry,
// run the synthetic training simulator, and summarize telemetry reports.
// Exit codes: 0 success, 1 validation/parse error, 2 I/O error.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calibadv/analysis.hpp"
#include "calibadv/calibration.hpp"
#include "calibadv/errors.hpp"
#include "calibadv/simulator.hpp"
#include "calibadv/trace.hpp"

namespace {

namespace fs = std::filesystem;
using namespace calibadv;

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Flag set shared by every subcommand; numeric flags mirror the
// CalibrationConfig / SimConfig fields one-to-one.
struct PipelineFlags {
  double lambda = 1.0;
  double correctness_threshold = 0.5;
  double eps = 1e-6;
  double ppl_threshold = 50.0;
  int think_prefix_tokens = 2;
  bool no_soft_penalty = false;
  bool no_rebalance = false;
  bool no_decouple = false;
  std::string pipeline;
  std::uint64_t seed = 0;

  CLI::Option* o_lambda = nullptr;
  CLI::Option* o_threshold = nullptr;
  CLI::Option* o_eps = nullptr;
  CLI::Option* o_ppl = nullptr;
  CLI::Option* o_prefix = nullptr;
  CLI::Option* o_pipeline = nullptr;
  CLI::Option* o_seed = nullptr;

  calibration::CalibrationConfig to_calibration() const {
    calibration::CalibrationConfig cfg;
    cfg.lambda = lambda;
    cfg.correctness_threshold = correctness_threshold;
    cfg.eps = eps;
    cfg.think_prefix_tokens = think_prefix_tokens;
    cfg.enable_soft_penalty = !no_soft_penalty;
    cfg.enable_rebalance = !no_rebalance;
    cfg.enable_decouple_think = !no_decouple;
    if (pipeline == "baseline") {
      cfg.enable_soft_penalty = false;
      cfg.enable_rebalance = false;
      cfg.enable_decouple_think = false;
    }
    cfg.validate();
    return cfg;
  }
};

void add_pipeline_flags(CLI::App* cmd, PipelineFlags& f) {
  f.o_lambda = cmd->add_option("--lambda", f.lambda, "Rebalance scaling coefficient (> 0)")
                   ->capture_default_str();
  f.o_threshold = cmd->add_option("--correctness-threshold", f.correctness_threshold,
                                  "r_final cutoff for a correct rollout, in (0,1]")
                      ->capture_default_str();
  f.o_eps = cmd->add_option("--eps", f.eps, "Normalization epsilon added to the std (> 0)")
                ->capture_default_str();
  f.o_ppl = cmd->add_option("--ppl-threshold", f.ppl_threshold, "High-PPL cutoff")
                ->capture_default_str();
  f.o_prefix = cmd->add_option("--think-prefix-tokens", f.think_prefix_tokens,
                               "Prepended think-tag token count (>= 0)")
                   ->capture_default_str();
  cmd->add_flag("--no-soft-penalty", f.no_soft_penalty,
                "Disable silver-document soft penalization");
  cmd->add_flag("--no-rebalance", f.no_rebalance, "Disable final-step advantage rebalance");
  cmd->add_flag("--no-decouple", f.no_decouple, "Disable think-prefix decoupling");
  f.o_pipeline = cmd->add_option("--pipeline", f.pipeline,
                                 "Advantage pipeline: baseline disables every stage")
                     ->check(CLI::IsMember({"baseline", "calibadv"}));
  f.o_seed = cmd->add_option("--seed", f.seed, "Simulator seed override");
}

int cmd_calibrate(const fs::path& input, const fs::path& output, const PipelineFlags& flags) {
  const calibration::CalibrationConfig cfg = flags.to_calibration();
  const std::vector<RolloutGroup> groups = parse_trace_file(input);
  const std::vector<calibration::GroupCalibration> results =
      calibration::calibrate_groups(groups, cfg);

  std::vector<grpo::AdvantageAssignment> assignments;
  assignments.reserve(results.size());
  for (const auto& r : results) assignments.push_back(r.assignment);
  calibration::write_assignment_file(groups, assignments, output);

  for (std::size_t i = 0; i < groups.size(); ++i) {
    double mean = 0.0;
    for (const auto& rb : results[i].rewards) mean += rb.r_final;
    mean /= static_cast<double>(results[i].rewards.size());
    std::cout << "question_id=" << groups[i].question_id << " G=" << groups[i].rollouts.size()
              << " reward_mean=" << fmt(mean) << " silver_docs=" << results[i].silver.docs.size()
              << '\n';
  }
  return 0;
}

void check_alignment(const std::vector<RolloutGroup>& traces,
                     const std::vector<RolloutGroup>& assigned) {
  if (traces.size() != assigned.size())
    throw std::invalid_argument("trace and assignment files hold different group counts");
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const RolloutGroup& a = traces[i];
    const RolloutGroup& b = assigned[i];
    if (a.question_id != b.question_id || a.rollouts.size() != b.rollouts.size())
      throw std::invalid_argument("group " + std::to_string(i + 1) +
                                  " is misaligned between trace and assignment files");
    for (std::size_t r = 0; r < a.rollouts.size(); ++r) {
      if (a.rollouts[r].rollout_id != b.rollouts[r].rollout_id ||
          a.rollouts[r].steps.size() != b.rollouts[r].steps.size())
        throw std::invalid_argument("group " + std::to_string(i + 1) + " rollout '" +
                                    a.rollouts[r].rollout_id +
                                    "' is misaligned between trace and assignment files");
    }
  }
}

int cmd_analyze(const fs::path& trace_path, const fs::path& assignment_path,
                const std::optional<fs::path>& out_path, const PipelineFlags& flags) {
  const calibration::CalibrationConfig cfg = flags.to_calibration();
  const std::vector<RolloutGroup> groups = parse_trace_file(trace_path);
  auto [assigned_groups, assignments] = calibration::parse_assignment_file(assignment_path);
  check_alignment(groups, assigned_groups);

  const std::vector<analysis::StepMispenalty> table =
      analysis::mispenalty_rate(groups, assignments, cfg);
  std::cout << "step_index,mispenalty_proportion,sample_count\n";
  for (const auto& row : table)
    std::cout << row.step_index << ',' << fmt(row.proportion) << ',' << row.sample_count << '\n';

  // Perplexity telemetry needs token logprobs on every masked step; traces
  // without them still get the mis-penalization table and the advantage ratio.
  bool have_logprobs = true;
  double nll_sum = 0.0;
  std::int64_t token_sum = 0;
  std::size_t rollout_count = 0;
  std::size_t high_ppl = 0;
  for (std::size_t g = 0; g < groups.size() && have_logprobs; ++g) {
    for (std::size_t i = 0; i < groups[g].rollouts.size(); ++i) {
      const RolloutTrace& rollout = groups[g].rollouts[i];
      const auto& masks = assignments[g].mask_tokens[i];
      try {
        const double ppl = analysis::rollout_perplexity(rollout, masks);
        if (ppl > flags.ppl_threshold) ++high_ppl;
      } catch (const std::invalid_argument&) {
        have_logprobs = false;
        break;
      }
      ++rollout_count;
      for (std::size_t s = 0; s < rollout.steps.size(); ++s) {
        const std::int64_t m =
            std::clamp<std::int64_t>(masks[s], 0, rollout.steps[s].token_count);
        for (std::int64_t k = 0; k < m; ++k)
          nll_sum -= (*rollout.steps[s].token_logprobs)[static_cast<std::size_t>(k)];
        token_sum += m;
      }
    }
  }

  std::vector<analysis::TelemetryRecord> records;
  if (have_logprobs && rollout_count > 0) {
    analysis::TelemetryRecord rec;
    rec.training_step = 0;
    rec.mean_token_nll = token_sum > 0 ? nll_sum / static_cast<double>(token_sum) : 0.0;
    rec.perplexity = std::exp(rec.mean_token_nll);
    rec.neg_pos_ratio = analysis::neg_pos_ratio(assignments);
    rec.high_ppl_ratio = static_cast<double>(high_ppl) / static_cast<double>(rollout_count);
    rec.mispenalty_by_step = table;
    records.push_back(std::move(rec));
  } else if (!have_logprobs) {
    const auto ratio = analysis::neg_pos_ratio(assignments);
    std::cout << "neg_pos_ratio=" << (ratio ? fmt(*ratio) : "undefined")
              << " (token_logprobs absent; perplexity telemetry unavailable)\n";
  }
  if (out_path) {
    analysis::emit_report(records, *out_path);
  } else {
    analysis::emit_report(records, std::cout);
  }
  return 0;
}

int cmd_simulate(const fs::path& config_path, const fs::path& out_dir,
                 const PipelineFlags& flags) {
  sim::SimConfig cfg = sim::load_sim_config(config_path);
  if (flags.o_lambda->count() > 0) cfg.calibration.lambda = flags.lambda;
  if (flags.o_threshold->count() > 0)
    cfg.calibration.correctness_threshold = flags.correctness_threshold;
  if (flags.o_eps->count() > 0) cfg.calibration.eps = flags.eps;
  if (flags.o_ppl->count() > 0) cfg.ppl_threshold = flags.ppl_threshold;
  if (flags.o_prefix->count() > 0) cfg.calibration.think_prefix_tokens = flags.think_prefix_tokens;
  if (flags.o_seed->count() > 0) cfg.seed = flags.seed;
  if (flags.no_soft_penalty) cfg.calibration.enable_soft_penalty = false;
  if (flags.no_rebalance) cfg.calibration.enable_rebalance = false;
  if (flags.no_decouple) cfg.calibration.enable_decouple_think = false;
  if (!flags.pipeline.empty())
    cfg.pipeline = flags.pipeline == "baseline" ? sim::Pipeline::kBaseline
                                                : sim::Pipeline::kCalibAdv;
  cfg.validate();

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "'");

  const sim::SimResult result = sim::run_experiment(cfg);
  analysis::emit_report(result.telemetry, out_dir / "telemetry.csv");
  write_trace_file(result.trace_archive, out_dir / "traces.jsonl");

  nlohmann::ordered_json summary;
  summary["config"] = sim::sim_config_to_json(cfg);
  summary["states_visited"] = result.final_policy.logits.size();
  if (!result.telemetry.empty()) {
    const auto& last = result.telemetry.back();
    nlohmann::ordered_json fin;
    fin["success_rate"] = last.success_rate.value_or(0.0);
    fin["policy_entropy"] = last.policy_entropy.value_or(0.0);
    fin["garbage_mass"] = last.garbage_mass.value_or(0.0);
    fin["perplexity"] = last.perplexity;
    fin["high_ppl_ratio"] = last.high_ppl_ratio;
    if (last.neg_pos_ratio)
      fin["neg_pos_ratio"] = *last.neg_pos_ratio;
    else
      fin["neg_pos_ratio"] = nullptr;
    summary["final"] = std::move(fin);
  }
  std::ofstream summary_out(out_dir / "policy_summary.json", std::ios::binary);
  if (!summary_out) throw IoError("cannot write policy summary");
  summary_out << summary.dump(2) << '\n';

  std::cout << "wrote " << (out_dir / "telemetry.csv").string() << ", "
            << (out_dir / "traces.jsonl").string() << ", "
            << (out_dir / "policy_summary.json").string() << '\n';
  return 0;
}

int cmd_report(const fs::path& telemetry_path) {
  const std::vector<analysis::TelemetryRecord> records = analysis::parse_report(telemetry_path);
  std::cout << "rows=" << records.size() << '\n';
  if (records.empty()) return 0;
  const auto& last = records.back();
  double max_ppl = 0.0;
  std::size_t neg_dominant = 0;
  std::size_t defined_ratios = 0;
  for (const auto& r : records) {
    max_ppl = std::max(max_ppl, r.perplexity);
    if (r.neg_pos_ratio) {
      ++defined_ratios;
      if (*r.neg_pos_ratio > 1.0) ++neg_dominant;
    }
  }
  std::cout << "final_step=" << last.training_step << '\n';
  if (last.success_rate) std::cout << "final_success_rate=" << fmt(*last.success_rate) << '\n';
  if (last.policy_entropy) std::cout << "final_policy_entropy=" << fmt(*last.policy_entropy) << '\n';
  std::cout << "final_perplexity=" << fmt(last.perplexity) << '\n';
  std::cout << "max_perplexity=" << fmt(max_ppl) << '\n';
  std::cout << "final_high_ppl_ratio=" << fmt(last.high_ppl_ratio) << '\n';
  std::cout << "neg_dominant_steps=" << neg_dominant << "/" << defined_ratios << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group-relative advantage calibration for deep-search rollouts"};
  app.require_subcommand(1);

  std::string calibrate_in, calibrate_out;
  PipelineFlags calibrate_flags;
  CLI::App* calibrate = app.add_subcommand("calibrate", "Calibrate advantages for a trace file");
  calibrate->add_option("input", calibrate_in, "Trace file (one group per line)")->required();
  calibrate->add_option("output", calibrate_out, "Assignment output file")->required();
  add_pipeline_flags(calibrate, calibrate_flags);

  std::string analyze_trace, analyze_assignment, analyze_out;
  PipelineFlags analyze_flags;
  CLI::App* analyze = app.add_subcommand("analyze", "Mis-penalization and telemetry diagnostics");
  analyze->add_option("trace", analyze_trace, "Trace file")->required();
  analyze->add_option("assignment", analyze_assignment, "Assignment file from calibrate")
      ->required();
  analyze->add_option("--out", analyze_out, "Telemetry CSV path (default: stdout)");
  add_pipeline_flags(analyze, analyze_flags);

  std::string simulate_config, simulate_out;
  PipelineFlags simulate_flags;
  CLI::App* simulate = app.add_subcommand("simulate", "Run the synthetic training simulator");
  simulate->add_option("config", simulate_config, "SimConfig JSON file")->required();
  simulate->add_option("outdir", simulate_out, "Output directory (created if missing)")
      ->required();
  add_pipeline_flags(simulate, simulate_flags);

  std::string report_in;
  PipelineFlags report_flags;
  CLI::App* report = app.add_subcommand("report", "Summarize a telemetry CSV");
  report->add_option("telemetry", report_in, "Telemetry CSV file")->required();
  add_pipeline_flags(report, report_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (calibrate->parsed()) return cmd_calibrate(calibrate_in, calibrate_out, calibrate_flags);
    if (analyze->parsed()) {
      std::optional<fs::path> out;
      if (!analyze_out.empty()) out = analyze_out;
      return cmd_analyze(analyze_trace, analyze_assignment, out, analyze_flags);
    }
    if (simulate->parsed()) return cmd_simulate(simulate_config, simulate_out, simulate_flags);
    if (report->parsed()) return cmd_report(report_in);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
