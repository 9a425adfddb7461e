#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossdiff/config.hpp"
#include "crossdiff/evaluation.hpp"

namespace crossdiff {

struct RunSummary {
  std::string label;
  Arch arch = Arch::Standard;
  int64_t M = 0;
  uint64_t seed = 0;
  EvalReport report;
  std::vector<RecoveryPoint> curve;
  double scale_a = 1.0;
  double scale_b = 1.0;
  // Combined exclusive recovery: recovered exclusive concepts (both models)
  // over the total exclusive concept count.
  std::optional<double> recovery_excl_combined;
};

// Build bank -> train -> evaluate for one (arch, seed); writes
// {metrics.jsonl, report.json, curve.csv, effective_config.json,
// checkpoints/} under run_dir when run_dir is nonempty.
RunSummary run_single(const ExperimentConfig& cfg, const ArchSpec& spec, uint64_t seed,
                      const std::string& run_dir);

// Full experiment over archs x seeds into cfg.output_dir; writes
// aggregate.csv (mean and standard error across seeds per (label, M)).
std::vector<RunSummary> run_experiment(const ExperimentConfig& cfg);

// Recovery-vs-dictionary-size sweep; every M in `dict_sizes` is run for every
// arch entry and seed. Writes sweep.csv plus the usual run directories.
std::vector<RunSummary> sweep_dictionary(const ExperimentConfig& cfg,
                                         const std::vector<int64_t>& dict_sizes);

// Re-reads a completed experiment directory and emits the plot-ready CSV
// bundles under <dir>/plot_data. Missing reports raise io_error listing the
// absent files; runs without recovery curves are skipped with a warning.
void emit_plot_data(const std::string& experiment_dir);

nlohmann::json report_to_json(const EvalReport& report, const std::string& label, Arch arch,
                              int64_t M, uint64_t seed);

void write_aggregate_csv(const std::vector<RunSummary>& summaries, const std::string& path);
void write_sweep_csv(const std::vector<RunSummary>& summaries, const std::string& path);

std::string format_double(double v);

}  // namespace crossdiff
