#pragma once

#include <cstdint>
#include <vector>

#include "crossdiff/crosscoder.hpp"
#include "crossdiff/evaluation.hpp"
#include "crossdiff/synthdata.hpp"

namespace crossdiff {

// Affine map between the two activation spaces, fitted by least squares.
struct StitchMap {
  Mat w;                    // d_b x d_a
  std::vector<double> b;    // d_b
  double fit_mse = 0.0;     // held-out mean squared error per row
  bool has_inverse = false;
  Mat w_inv;                // d_a x d_b
  std::vector<double> b_inv;
  double fit_mse_inverse = 0.0;
  double inversion_weight = 0.0;

  std::vector<double> apply(const double* x_a) const;
  std::vector<double> apply_inverse(const double* x_b) const;
  // Direction mapping: linear part only, no translation.
  std::vector<double> map_direction(const double* v_a) const;
  std::vector<double> map_direction_inverse(const double* v_b) const;
};

// Closed-form ridge fit when inversion_weight == 0 (the default); a joint
// gradient fit of both directions with the round-trip penalty
// ||x - T'(T(x))||^2 otherwise. `ridge` scales with trace(cov)/d; ridge == 0
// on rank-deficient data raises numeric_error. fit_mse fields are evaluated
// on the heldout batch.
StitchMap fit_stitch(const std::vector<ActivationPairBatch>& train,
                     const ActivationPairBatch& heldout, double ridge = 1e-6,
                     double inversion_weight = 0.0, bool fit_inverse = true);

double stitch_heldout_mse(const Mat& w, const std::vector<double>& b, const Mat& x_from,
                          const Mat& x_to);

// Translate a steering vector from model A to model B through the shared
// feature dictionary: take the top-n shared live features by cosine with v_a,
// average their model-B decoder rows weighted by those cosines, and rescale
// to ||v_a||. All cosines <= 0 (or a degenerate average) raises numeric_error.
std::vector<double> transfer_vector(const CrosscoderModel& model, const std::vector<double>& v_a,
                                    int64_t n, const std::vector<int32_t>& dead = {});

// Geometric desk-scale stand-in for the behavioural exclusivity score, on the
// paper's 1..5 scale via 6 - s with s = 1 + 4*max(0, cos*). cos* is the best
// cosine between the stitched decoder direction and the ground-truth
// directions observable in the target model; features on the B side (DFC
// B-partition, or relative norm below 0.5 otherwise) are scored through the
// inverse map against the A-frame concepts.
double exclusivity_proxy(const CrosscoderModel& model, const StitchMap& stitch, int64_t feature,
                         const ConceptBank& bank);

std::vector<ExclusivityRecord> exclusivity_proxy_all(const CrosscoderModel& model,
                                                     const StitchMap& stitch,
                                                     const ConceptBank& bank,
                                                     const std::vector<FeatureClass>& classes);

}  // namespace crossdiff
