#include "crossdiff/synthdata.hpp"

#include <algorithm>
#include <cmath>

#include "crossdiff/errors.hpp"

namespace crossdiff {

void ToyConfig::validate() const {
  if (n_concepts < 2) throw config_error("ToyConfig.n_concepts must be >= 2");
  if (d_act < 2) throw config_error("ToyConfig.d_act must be >= 2");
  if (r_exclusive < 0.0 || r_exclusive >= 1.0)
    throw config_error("ToyConfig.r_exclusive must be in [0, 1)");
  if (corr_rank < 1) throw config_error("ToyConfig.corr_rank must be >= 1");
  if (decay_lambda < 0.0) throw config_error("ToyConfig.decay_lambda must be >= 0");
  if (effective_k_target() <= 0.0) throw config_error("ToyConfig.k_target must be > 0");
  if (tau < 0.0) throw config_error("ToyConfig.tau must be >= 0");
  if (sigma_noise < 0.0) throw config_error("ToyConfig.sigma_noise must be >= 0");
  if (eps_min <= 0.0) throw config_error("ToyConfig.eps_min must be > 0");
  if (sigma_diag < 0.0) throw config_error("ToyConfig.sigma_diag must be >= 0");
}

int64_t ConceptBank::count(ConceptClass c) const {
  return std::count(partition.begin(), partition.end(), c);
}

std::vector<double> probabilities_from_latent(const std::vector<double>& z,
                                              const std::vector<int64_t>& perm, double decay_lambda,
                                              double k_target, double eps_min) {
  const size_t n = z.size();
  std::vector<double> p(n);
  for (size_t i = 0; i < n; ++i) p[i] = 1.0 / (1.0 + std::exp(-z[i]));
  for (size_t i = 0; i < n; ++i) p[i] *= std::exp(-decay_lambda * static_cast<double>(perm[i]));
  double sum = 0.0;
  for (double v : p) sum += v;
  if (sum <= 0.0) throw numeric_error("probability pipeline: non-positive mass before rescale");
  const double scale = k_target / sum;
  for (size_t i = 0; i < n; ++i) p[i] = std::max(eps_min, p[i] * scale);
  return p;
}

std::vector<double> build_probabilities(const ToyConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int64_t n = cfg.n_concepts;
  const int64_t r = cfg.corr_rank;
  Rng rng(derive_seed(seed, SeedDomain::Probabilities));

  // Low-rank factor L (n x r), entries N(0, 0.5/sqrt(r)).
  const double l_sd = std::sqrt(0.5 / std::sqrt(static_cast<double>(r)));
  Mat L(n, r);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < r; ++j) L.at(i, j) = l_sd * rng.next_gaussian();

  std::vector<double> u(r);
  for (int64_t j = 0; j < r; ++j) u[j] = rng.next_gaussian();

  std::vector<double> z(n);
  for (int64_t i = 0; i < n; ++i) z[i] = dot(L.row(i), u.data(), r) + cfg.sigma_diag * rng.next_gaussian();

  std::vector<int64_t> perm(n);
  for (int64_t i = 0; i < n; ++i) perm[i] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
    std::swap(perm[i], perm[j]);
  }

  return probabilities_from_latent(z, perm, cfg.decay_lambda, cfg.effective_k_target(), cfg.eps_min);
}

ConceptBank build_concept_bank(const ToyConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int64_t n = cfg.n_concepts;
  const int64_t d = cfg.d_act;

  ConceptBank bank;
  bank.cfg = cfg;
  bank.rng_seed = seed;

  {
    Rng rng(derive_seed(seed, SeedDomain::ConceptVectors));
    bank.concepts = Mat(n, d);
    for (int64_t i = 0; i < n; ++i) {
      double* row = bank.concepts.row(i);
      for (int64_t j = 0; j < d; ++j) row[j] = rng.next_gaussian();
      const double nrm = l2_norm(row, d);
      for (int64_t j = 0; j < d; ++j) row[j] /= nrm;
    }
  }

  {
    // Seeded shuffle, then contiguous blocks, so category membership is
    // independent of generation order.
    Rng rng(derive_seed(seed, SeedDomain::Partition));
    std::vector<int64_t> order(n);
    for (int64_t i = 0; i < n; ++i) order[i] = i;
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
      std::swap(order[i], order[j]);
    }
    const int64_t n_excl = std::llround(static_cast<double>(n) * cfg.r_exclusive / 2.0);
    if (2 * n_excl > n) throw config_error("ToyConfig.r_exclusive leaves no shared concepts");
    bank.partition.assign(n, ConceptClass::Shared);
    for (int64_t t = 0; t < n_excl; ++t) bank.partition[order[t]] = ConceptClass::AExclusive;
    for (int64_t t = n_excl; t < 2 * n_excl; ++t) bank.partition[order[t]] = ConceptClass::BExclusive;
  }

  {
    Rng rng(derive_seed(seed, SeedDomain::Transform));
    bank.transform_a = Mat(d, d);
    if (cfg.identity_transform) {
      for (int64_t i = 0; i < d; ++i) bank.transform_a.at(i, i) = 1.0;
    } else {
      for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) bank.transform_a.at(i, j) = 0.5 * rng.next_gaussian();
    }
    bank.transform_b.assign(d, 0.0);
    for (int64_t i = 0; i < d; ++i) bank.transform_b[i] = cfg.tau * rng.next_gaussian();
  }

  {
    bank.concepts_b = Mat(n, d);
    std::vector<double> src_norms, dst_norms;
    for (int64_t i = 0; i < n; ++i) {
      if (!bank.observable_b(i)) continue;
      const double* c = bank.concepts.row(i);
      double* out = bank.concepts_b.row(i);
      for (int64_t r = 0; r < d; ++r) out[r] = dot(bank.transform_a.row(r), c, d) + bank.transform_b[r];
      src_norms.push_back(l2_norm(c, d));
      dst_norms.push_back(l2_norm(out, d));
    }
    const double med_dst = median(dst_norms);
    if (med_dst <= 0.0) throw numeric_error("concept transform collapsed to zero median norm");
    const double scale = median(src_norms) / med_dst;
    for (int64_t i = 0; i < n; ++i) {
      if (!bank.observable_b(i)) continue;
      double* out = bank.concepts_b.row(i);
      for (int64_t r = 0; r < d; ++r) out[r] *= scale;
    }
  }

  bank.probs = build_probabilities(cfg, seed);
  return bank;
}

namespace {

// One attempt of Bernoulli draws across all concepts; returns active indices
// (ascending by construction).
void bernoulli_attempt(Rng& rng, const std::vector<double>& probs, std::vector<int32_t>& active) {
  active.clear();
  for (size_t i = 0; i < probs.size(); ++i) {
    if (rng.next_double() < probs[i]) active.push_back(static_cast<int32_t>(i));
  }
}

}  // namespace

ActivationPairBatch sample_batch(const ConceptBank& bank, int64_t batch, double noise,
                                 StreamKey key, bool record_active_sets) {
  if (batch < 1) throw config_error("sample_batch: batch must be >= 1");
  if (noise < 0.0) throw config_error("sample_batch: noise must be >= 0");
  const int64_t d = bank.cfg.d_act;

  ActivationPairBatch out;
  out.x_a = Mat(batch, d);
  out.x_b = Mat(batch, d);
  if (record_active_sets) out.active_sets.emplace(batch);

  // Highest-probability concept (lowest index on ties) for the empty-row
  // fallback.
  int32_t fallback = 0;
  for (size_t i = 1; i < bank.probs.size(); ++i) {
    if (bank.probs[i] > bank.probs[fallback]) fallback = static_cast<int32_t>(i);
  }

#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < batch; ++r) {
    Rng rng(key.row_seed(static_cast<uint64_t>(r)));
    std::vector<int32_t> active;
    for (int attempt = 0; attempt < 9 && active.empty(); ++attempt) {
      bernoulli_attempt(rng, bank.probs, active);
    }
    if (active.empty()) active.push_back(fallback);

    double* xa = out.x_a.row(r);
    double* xb = out.x_b.row(r);
    std::vector<ActiveConcept>* rec =
        record_active_sets ? &(*out.active_sets)[r] : nullptr;
    for (int32_t i : active) {
      const double s = rng.next_double();
      if (rec) rec->push_back({i, s});
      if (bank.observable_a(i)) {
        const double* c = bank.concepts.row(i);
        for (int64_t j = 0; j < d; ++j) xa[j] += s * c[j];
      }
      if (bank.observable_b(i)) {
        const double* c = bank.concepts_b.row(i);
        for (int64_t j = 0; j < d; ++j) xb[j] += s * c[j];
      }
    }
    if (noise > 0.0) {
      for (int64_t j = 0; j < d; ++j) xa[j] += noise * rng.next_gaussian();
      for (int64_t j = 0; j < d; ++j) xb[j] += noise * rng.next_gaussian();
    }
  }
  return out;
}

ActivationPairBatch compose_pair(const ConceptBank& bank, const std::vector<ActiveConcept>& actives) {
  const int64_t d = bank.cfg.d_act;
  ActivationPairBatch out;
  out.x_a = Mat(1, d);
  out.x_b = Mat(1, d);
  double* xa = out.x_a.row(0);
  double* xb = out.x_b.row(0);
  for (const auto& ac : actives) {
    if (bank.observable_a(ac.concept_idx)) {
      const double* c = bank.concepts.row(ac.concept_idx);
      for (int64_t j = 0; j < d; ++j) xa[j] += ac.scale * c[j];
    }
    if (bank.observable_b(ac.concept_idx)) {
      const double* c = bank.concepts_b.row(ac.concept_idx);
      for (int64_t j = 0; j < d; ++j) xb[j] += ac.scale * c[j];
    }
  }
  out.active_sets.emplace(1);
  (*out.active_sets)[0] = actives;
  return out;
}

}  // namespace crossdiff
