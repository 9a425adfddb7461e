#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crossdiff/crosscoder.hpp"
#include "crossdiff/synthdata.hpp"

namespace crossdiff {

struct Match {
  int32_t feature;
  int32_t concept_idx;
  double cosine;
  ConceptClass category;  // of the concept
};

enum class FeatureClass : uint8_t { Shared = 0, AExclusive = 1, BExclusive = 2, Dead = 3 };

const char* feature_class_name(FeatureClass c);

struct EvalThresholds {
  double theta_recovery = 0.8;
  double theta_low = 0.2;
  double theta_high = 0.8;
};

struct ExclusivityRecord {
  int32_t feature;
  double score;  // 1 (shared) .. 5 (exclusive)
  FeatureClass cls;
};

struct EvalReport {
  // Recovery rates are deduplicated at the concept level: a concept counts
  // once however many features recover it. Empty categories report
  // not-applicable instead of 0/0.
  std::optional<double> recovery_total;
  std::optional<double> recovery_shared;
  std::optional<double> recovery_a_excl;
  std::optional<double> recovery_b_excl;
  // Both exclusive categories pooled: recovered exclusive concepts over the
  // total exclusive concept count.
  std::optional<double> recovery_excl_combined;

  // A false positive is a feature classified as exclusive that does not
  // recover any concept exclusive to its claimed model; it either recovers
  // some other concept (shared_as_exclusive) or none at all (no_concept).
  // The two buckets partition the false-positive set.
  std::optional<double> false_positive_rate;
  int64_t fp_shared_as_exclusive = 0;
  int64_t fp_no_concept = 0;
  int64_t exclusive_classified = 0;

  double fve_a = 0.0;
  double fve_b = 0.0;
  double dead_fraction = 0.0;

  std::vector<int64_t> relative_norm_histogram;  // 50 uniform bins over [0, 1]

  std::vector<Match> matches;
  std::vector<FeatureClass> classes;  // per feature

  // Reserved for externally-supplied interpretability scores.
  std::optional<double> detection_score;
  // Appended by the transfer module when a stitch map is available.
  std::vector<ExclusivityRecord> exclusivity_proxy;
};

// Feature j recovers concept i when their cosine exceeds theta in the
// concept's observable frame: A-frame concepts against w_dec_a rows, B-frame
// (concepts_b) against w_dec_b rows; shared concepts may match in either.
std::vector<Match> match_concepts(const CrosscoderModel& model, const ConceptBank& bank,
                                  double theta_recovery);

// Classification by relative decoder norm; `dead` (ascending) is excluded.
// DFC partition features are classified by construction and checked to be
// consistent with R in {0, 1}.
std::vector<FeatureClass> classify_features(const CrosscoderModel& model, double theta_low,
                                            double theta_high, const std::vector<int32_t>& dead);

// Fills the recovery and false-positive fields of a report.
void recovery_and_fp(const std::vector<Match>& matches, const std::vector<FeatureClass>& classes,
                     const ConceptBank& bank, EvalReport& report);

// FVE = 1 - FVU over `rows` held-out rows; FVU is the ratio of mean squared
// reconstruction error to input variance about the mean (per model). The
// heldout stream must be disjoint from training (fresh seed); normalization
// scales are applied, outlier masking is not.
std::pair<double, double> fve(const CrosscoderModel& model, BatchSource& heldout, int64_t rows,
                              double scale_a, double scale_b);

std::vector<int64_t> relative_norm_histogram(const CrosscoderModel& model,
                                             const std::vector<FeatureClass>& classes,
                                             int64_t bins = 50);

// Full snapshot evaluation; pass rows = 0 to skip the FVE pass.
EvalReport evaluate(const CrosscoderModel& model, const ConceptBank& bank,
                    const EvalThresholds& th, const std::vector<int32_t>& dead,
                    BatchSource* heldout, int64_t heldout_rows, double scale_a, double scale_b);

struct RecoveryPoint {
  int64_t step;
  std::optional<double> shared;
  std::optional<double> a_excl;
  std::optional<double> b_excl;
  std::optional<double> fp_rate;
};

// Per-checkpoint category recovery for the learning-dynamics curves.
std::vector<RecoveryPoint> recovery_curve(const std::vector<std::pair<int64_t, CrosscoderModel>>& checkpoints,
                                          const ConceptBank& bank, const EvalThresholds& th);

}  // namespace crossdiff
