#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "crossdiff/crosscoder.hpp"
#include "crossdiff/evaluation.hpp"
#include "crossdiff/synthdata.hpp"
#include "crossdiff/training.hpp"

namespace crossdiff {

struct ArchSpec {
  Arch arch = Arch::Standard;
  int64_t M = 256;
  // DFC partition fractions (shared is the remainder).
  double exclusive_frac_a = 0.05;
  double exclusive_frac_b = 0.05;
  // DSF designated-shared settings.
  double dsf_fraction = 0.1;
  double dsf_k_multiplier = 2.0;
  std::string label;  // defaults to the arch name

  PartitionLayout make_layout() const;
  std::optional<DsfDesignated> make_dsf() const;
};

struct EvalConfig {
  double theta_recovery = 0.8;
  double theta_low = 0.2;
  double theta_high = 0.8;
  int64_t heldout_rows = 16384;
  bool exclusivity_proxy = false;
  int64_t stitch_pairs = 100000;
  double stitch_ridge = 1e-6;
};

struct ExperimentConfig {
  ToyConfig toy;
  std::vector<ArchSpec> archs;
  TrainConfig train;
  EvalConfig eval;
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string output_dir = "runs";
  double init_decoder_norm = 0.4;

  void validate() const;
};

// Presets: `paper` mirrors the full-size toy setup; `desk` shrinks it to
// n_concepts 256 / d_act 64 for minutes-scale runs.
ExperimentConfig paper_preset();
ExperimentConfig desk_preset();

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json effective_config_json(const ExperimentConfig& cfg);
ExperimentConfig load_config_file(const std::string& path);

}  // namespace crossdiff
