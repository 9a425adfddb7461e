#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "crossdiff/crosscoder.hpp"
#include "crossdiff/synthdata.hpp"

namespace crossdiff {

struct TrainConfig {
  double lr = 1e-4;
  int64_t steps = 100000;
  int64_t warmup_steps = 1000;
  int64_t batch = 2048;
  int64_t k_final = 200;
  int64_t k_initial = 1000;
  int64_t anneal_steps = 5000;
  double alpha_aux = 0.03;
  int64_t k_aux = 512;
  int64_t dead_window_tokens = 10000000;
  uint64_t seed = 0;
  double outlier_factor = 2.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t calibration_batches = 10;
  int64_t checkpoint_every = 0;  // 0: final checkpoint only
  int64_t eval_every = 0;        // 0: no inline evaluation hook

  void validate() const;
};

// One tensor per trainable parameter; reused for gradients and Adam moments.
struct ParamTensors {
  Mat w_enc_a, w_enc_b, w_dec_a, w_dec_b;
  std::vector<double> b_enc, b_dec_a, b_dec_b;

  static ParamTensors zeros_like(const CrosscoderModel& m);
};

struct LossParts {
  double recon_a = 0.0;
  double recon_b = 0.0;
  double aux = 0.0;
  double total = 0.0;
};

struct TrainState {
  ParamTensors adam_m;
  ParamTensors adam_v;
  int64_t step = 0;
  std::vector<int64_t> tokens_since_fire;
  double norm_scale_a = 1.0;
  double norm_scale_b = 1.0;
  // Small ring of recent loss values for diagnostics on abort.
  std::vector<LossParts> recent;
  size_t recent_next = 0;

  static TrainState init(const CrosscoderModel& m);
  void push_recent(const LossParts& lp);
};

// Frozen TopK selections (positions only) so the loss becomes a smooth
// function of the parameters; used by the finite-difference gradient checks.
struct FrozenMasks {
  SparseActs main;
  SparseActs aux;
};

struct StepResult {
  LossParts loss;
  ParamTensors grads;
  std::vector<uint8_t> fired;  // per feature: nonzero activation this batch
  SparseActs acts;
  SparseActs aux_acts;  // auxiliary-path selection (dead features)
};

// scale_x = sqrt((d_a + d_b) / 2) / median(row norms of x), per model.
std::pair<double, double> compute_normalization(const ActivationPairBatch& sample, int64_t d_a,
                                                int64_t d_b);

// 1 = keep; a row is dropped when its norm in either model exceeds
// factor * that model's batch median norm.
std::vector<uint8_t> mask_outliers(const ActivationPairBatch& batch, double factor);

ActivationPairBatch filter_rows(const ActivationPairBatch& batch, const std::vector<uint8_t>& keep);

// Loss and analytic gradients for one (normalized, outlier-filtered) batch.
// Straight-through TopK: the selection mask is treated as a constant in the
// backward pass. `dead` lists currently-dead feature indices (ascending); the
// auxiliary loss reconstructs the residual with the per-row top-k_aux dead
// features and is skipped when `dead` is empty or alpha_aux is 0. A non-finite
// auxiliary loss is replaced by 0 for the step; a non-finite main loss throws.
StepResult loss_and_grads(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b,
                          const std::vector<int32_t>& dead, double alpha_aux, int64_t k_aux,
                          int64_t k_effective, const FrozenMasks* frozen = nullptr);

// Loss only, honouring frozen masks; the finite-difference oracle evaluates
// this at perturbed parameters.
LossParts loss_with_masks(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b,
                          const std::vector<int32_t>& dead, double alpha_aux, int64_t k_aux,
                          const FrozenMasks& frozen);

double warmup_lr(double lr, int64_t step, int64_t warmup_steps);
int64_t anneal_k(int64_t k_initial, int64_t k_final, int64_t step, int64_t anneal_steps);

std::vector<int32_t> dead_features(const TrainState& state, int64_t dead_window_tokens);

struct MetricsRecord {
  int64_t step = 0;
  double loss_recon_a = 0.0;  // per-row means
  double loss_recon_b = 0.0;
  double loss_aux = 0.0;
  int64_t k = 0;
  double lr = 0.0;
  double dead_frac = 0.0;
  double fve_a = 0.0;
  double fve_b = 0.0;
};

struct TrainHooks {
  // Called with the number of completed steps (0 before the first step).
  std::function<void(int64_t, const CrosscoderModel&, const TrainState&)> on_eval;
  std::function<void(int64_t, const CrosscoderModel&, const TrainState&)> on_checkpoint;
};

struct TrainResult {
  TrainState state;
  std::vector<MetricsRecord> metrics;
};

// Adam with linear LR warmup and linear sparsity annealing. The first
// cfg.calibration_batches batches of the stream are consumed to fix the
// normalization scales, then training proceeds on the rest. DFC structural
// zeros are re-applied after every update; DSF tied rows receive the summed
// decoder gradient on both copies and therefore stay bit-identical.
TrainResult train(CrosscoderModel& model, BatchSource& stream, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

}  // namespace crossdiff
