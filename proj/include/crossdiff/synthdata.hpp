#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "crossdiff/mat.hpp"
#include "crossdiff/rng.hpp"

namespace crossdiff {

enum class ConceptClass : uint8_t { Shared = 0, AExclusive = 1, BExclusive = 2 };

// Ground-truth environment parameters. Defaults follow the full-size toy
// setup; the desk preset (config module) shrinks n_concepts/d_act for
// minutes-scale runs.
struct ToyConfig {
  int64_t n_concepts = 2048;
  int64_t d_act = 256;
  double r_exclusive = 0.05;
  double k_target = 0.0;  // <= 0 means n_concepts / 100
  int64_t corr_rank = 10;
  double sigma_diag = 1.0;
  double decay_lambda = 0.001;
  double tau = 0.1;
  double sigma_noise = 0.01;
  double eps_min = 1e-4;
  // Test hook: replace the random linear map with the identity.
  bool identity_transform = false;

  double effective_k_target() const {
    return k_target > 0.0 ? k_target : static_cast<double>(n_concepts) / 100.0;
  }

  void validate() const;
};

// Immutable after construction; shareable across threads.
struct ConceptBank {
  Mat concepts;    // n_concepts x d_act, unit-norm rows (model-A frame)
  std::vector<ConceptClass> partition;
  Mat transform_a;               // d_act x d_act linear map
  std::vector<double> transform_b;  // d_act translation
  // Model-B frame. Full n_concepts x d_act; rows for A-exclusive concepts are
  // zero (model B never observes them). Observable rows carry the affine
  // image rescaled so their median L2 norm matches the source rows'.
  Mat concepts_b;
  std::vector<double> probs;
  uint64_t rng_seed = 0;
  ToyConfig cfg;

  bool observable_a(int64_t i) const { return partition[i] != ConceptClass::BExclusive; }
  bool observable_b(int64_t i) const { return partition[i] != ConceptClass::AExclusive; }

  int64_t count(ConceptClass c) const;
};

struct ActiveConcept {
  int32_t concept_idx;
  double scale;
};

struct ActivationPairBatch {
  Mat x_a;
  Mat x_b;
  std::optional<std::vector<std::vector<ActiveConcept>>> active_sets;

  int64_t rows() const { return x_a.rows; }
};

ConceptBank build_concept_bank(const ToyConfig& cfg, uint64_t seed);

std::vector<double> build_probabilities(const ToyConfig& cfg, uint64_t seed);

// Steps 2-4 of the probability pipeline given the latent z and the frequency
// permutation; exposed so tests can drive it with a forced latent.
std::vector<double> probabilities_from_latent(const std::vector<double>& z,
                                              const std::vector<int64_t>& perm, double decay_lambda,
                                              double k_target, double eps_min);

ActivationPairBatch sample_batch(const ConceptBank& bank, int64_t batch, double noise,
                                 StreamKey key, bool record_active_sets = false);

// Noise-free assembly of one activation pair from an explicit active set.
// Matches what sample_batch produces for those actives at noise = 0.
ActivationPairBatch compose_pair(const ConceptBank& bank, const std::vector<ActiveConcept>& actives);

// Sequential batch source abstraction so trainers can consume either the toy
// stream or injected fixtures.
class BatchSource {
public:
  virtual ~BatchSource() = default;
  virtual ActivationPairBatch next() = 0;
  virtual int64_t d_a() const = 0;
  virtual int64_t d_b() const = 0;
};

class ToyBatchSource final : public BatchSource {
public:
  ToyBatchSource(const ConceptBank& bank, int64_t batch, double noise, uint64_t stream_seed)
      : bank_(&bank), batch_(batch), noise_(noise), key_{stream_seed, 0} {}

  ActivationPairBatch next() override {
    ActivationPairBatch b = sample_batch(*bank_, batch_, noise_, key_);
    key_.counter++;
    return b;
  }
  int64_t d_a() const override { return bank_->cfg.d_act; }
  int64_t d_b() const override { return bank_->cfg.d_act; }

private:
  const ConceptBank* bank_;
  int64_t batch_;
  double noise_;
  StreamKey key_;
};

}  // namespace crossdiff
