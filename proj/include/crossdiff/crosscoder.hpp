#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "crossdiff/kernels.hpp"
#include "crossdiff/mat.hpp"

namespace crossdiff {

enum class Arch : uint8_t { Standard = 0, DFC = 1, DSF = 2 };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& s);

struct IndexRange {
  int64_t begin = 0;
  int64_t end = 0;
  int64_t size() const { return end - begin; }
  bool contains(int64_t i) const { return i >= begin && i < end; }
};

// Canonical feature order: [A-exclusive | B-exclusive | shared].
struct PartitionLayout {
  IndexRange a_exclusive;
  IndexRange b_exclusive;
  IndexRange shared;
  int64_t dict_size = 0;

  static PartitionLayout standard(int64_t M);
  static PartitionLayout dfc(int64_t M, int64_t n_a, int64_t n_b);

  void validate(Arch arch) const;
};

struct DsfDesignated {
  IndexRange range;      // inside the shared range
  double k_multiplier = 2.0;
};

struct CrosscoderModel {
  Arch arch = Arch::Standard;
  int64_t d_a = 0;
  int64_t d_b = 0;
  int64_t dict_size = 0;
  int64_t k = 0;  // active-feature budget per sample, enforced batch-wise
  PartitionLayout layout;
  std::optional<DsfDesignated> dsf_designated;

  // Feature-major storage: one row per dictionary feature.
  Mat w_enc_a;  // M x d_a  (logical orientation d_a x M)
  Mat w_enc_b;  // M x d_b
  std::vector<double> b_enc;    // M
  Mat w_dec_a;  // M x d_a
  Mat w_dec_b;  // M x d_b
  std::vector<double> b_dec_a;  // d_a
  std::vector<double> b_dec_b;  // d_b

  // Routing tables derived from (arch, layout); see rebuild_routing().
  std::vector<double> enc_coef_a;  // per feature: 0, 0.5 or 1
  std::vector<double> enc_coef_b;
  std::vector<uint8_t> dec_vis_a;  // feature contributes to model-A decode
  std::vector<uint8_t> dec_vis_b;

  void rebuild_routing();
  // Re-applies the DFC structural zeros to cross-partition decoder rows.
  void enforce_structural_zeros();
};

struct ForwardTrace {
  Mat pre_acts;       // batch x M
  SparseActs acts;    // post-TopK, non-negative values
  Mat recon_a;        // batch x d_a
  Mat recon_b;        // batch x d_b
  std::vector<uint8_t> topk_mask;  // batch*M booleans, row-major
};

CrosscoderModel init_model(Arch arch, int64_t d_a, int64_t d_b, int64_t M, int64_t k,
                           const PartitionLayout& layout, double init_decoder_norm, uint64_t seed,
                           std::optional<DsfDesignated> dsf = std::nullopt);

// Averaged (or partition-routed, for DFC exclusives) encoder pre-activations.
Mat encode(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b);

// Keeps the batch*k_effective largest strictly-positive entries across the
// whole batch x M grid; ties broken by (row, column) lexicographic order.
// For DSF models the budget is split into a designated pool and a remainder
// pool (see DsfDesignated).
SparseActs batch_topk(const Mat& pre_acts, int64_t k_effective,
                      const std::optional<DsfDesignated>& dsf = std::nullopt);

std::vector<uint8_t> mask_from_acts(const SparseActs& acts);

void decode(const CrosscoderModel& model, const SparseActs& acts, Mat& recon_a, Mat& recon_b);

ForwardTrace forward(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b,
                     int64_t k_effective);

// ||d_i^A|| / (||d_i^A|| + ||d_i^B||); throws undefined_feature_error when
// both rows are zero (caller treats the feature as dead).
double relative_decoder_norm(const CrosscoderModel& model, int64_t feature);

}  // namespace crossdiff
