#include <doctest.h>

#include <cmath>

#include "crossdiff/errors.hpp"
#include "crossdiff/transfer.hpp"

using namespace crossdiff;

namespace {

Mat random_mat(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (double& v : m.data) v = scale * rng.next_gaussian();
  return m;
}

// x_b = W x_a + b exactly.
std::pair<std::vector<ActivationPairBatch>, ActivationPairBatch> affine_pairs(
    const Mat& w, const std::vector<double>& b, int64_t rows, uint64_t seed) {
  Rng rng(seed);
  auto make = [&](int64_t n) {
    ActivationPairBatch batch;
    batch.x_a = random_mat(n, w.cols, rng);
    batch.x_b = Mat(n, w.rows);
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t i = 0; i < w.rows; ++i) {
        batch.x_b.at(r, i) = dot(w.row(i), batch.x_a.row(r), w.cols) + b[i];
      }
    }
    return batch;
  };
  std::vector<ActivationPairBatch> train;
  train.push_back(make(rows));
  return {std::move(train), make(rows / 4 + 8)};
}

}  // namespace

TEST_CASE("exact affine data identifies the map") {
  Rng rng(3);
  const Mat w = random_mat(6, 5, rng, 0.7);
  std::vector<double> b(6);
  for (double& v : b) v = rng.next_gaussian();
  auto [train, heldout] = affine_pairs(w, b, 400, 4);
  const StitchMap map = fit_stitch(train, heldout, 0.0, 0.0, false);
  for (int64_t i = 0; i < 6; ++i) {
    CHECK(map.b[i] == doctest::Approx(b[i]).epsilon(1e-6));
    for (int64_t j = 0; j < 5; ++j) {
      CHECK(std::abs(map.w.at(i, j) - w.at(i, j)) < 1e-4);
    }
  }
  CHECK(map.fit_mse < 1e-12);
}

TEST_CASE("identity data fits the identity map") {
  Rng rng(9);
  ActivationPairBatch batch;
  batch.x_a = random_mat(300, 4, rng);
  batch.x_b = batch.x_a;
  ActivationPairBatch heldout;
  heldout.x_a = random_mat(40, 4, rng);
  heldout.x_b = heldout.x_a;
  const StitchMap map = fit_stitch({batch}, heldout, 0.0, 0.0, false);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(map.b[i] == doctest::Approx(0.0).epsilon(1e-8));
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(map.w.at(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));
    }
  }
}

TEST_CASE("rank-deficient data with zero ridge raises a singular-system error") {
  Rng rng(11);
  ActivationPairBatch batch;
  batch.x_a = Mat(100, 6);
  batch.x_b = Mat(100, 6);
  for (int64_t r = 0; r < 100; ++r) {
    const double t = rng.next_gaussian();
    for (int64_t c = 0; c < 6; ++c) {
      batch.x_a.at(r, c) = t * (c + 1.0);  // rank-1 inputs
      batch.x_b.at(r, c) = t;
    }
  }
  CHECK_THROWS_AS(fit_stitch({batch}, batch, 0.0, 0.0, false), numeric_error);
  // A positive ridge regularizes the same data.
  const StitchMap map = fit_stitch({batch}, batch, 1e-6, 0.0, false);
  CHECK(std::isfinite(map.fit_mse));
}

TEST_CASE("the least-squares gradient vanishes at the fitted map") {
  Rng rng(13);
  ActivationPairBatch batch;
  batch.x_a = random_mat(500, 5, rng);
  batch.x_b = random_mat(500, 4, rng);
  const StitchMap map = fit_stitch({batch}, batch, 0.0, 0.0, false);
  // grad_W of sum ||W x + b - y||^2 = 2 sum (W x + b - y) x^T
  Mat grad(4, 5);
  std::vector<double> grad_b(4, 0.0);
  double scale = 0.0;
  for (int64_t r = 0; r < 500; ++r) {
    const double* x = batch.x_a.row(r);
    for (int64_t i = 0; i < 4; ++i) {
      const double resid = dot(map.w.row(i), x, 5) + map.b[i] - batch.x_b.at(r, i);
      for (int64_t j = 0; j < 5; ++j) grad.at(i, j) += 2.0 * resid * x[j];
      grad_b[i] += 2.0 * resid;
      scale += std::abs(batch.x_b.at(r, i));
    }
  }
  double gnorm = 0.0;
  for (double v : grad.data) gnorm += v * v;
  for (double v : grad_b) gnorm += v * v;
  CHECK(std::sqrt(gnorm) < 1e-6 * scale);
}

TEST_CASE("the inversion penalty improves the round trip on held-out data") {
  Rng rng(17);
  // Invertible ground-truth map with observation noise.
  Mat w(4, 4);
  for (int64_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  w.at(0, 1) = 0.4;
  w.at(2, 3) = -0.3;
  std::vector<double> b = {0.1, -0.2, 0.05, 0.0};
  auto [train, heldout] = affine_pairs(w, b, 600, 18);
  for (double& v : train[0].x_b.data) v += 0.05 * rng.next_gaussian();

  const StitchMap plain = fit_stitch(train, heldout, 1e-6, 0.0, true);
  const StitchMap joint = fit_stitch(train, heldout, 1e-6, 1.0, true);
  auto round_trip = [&](const StitchMap& m) {
    double total = 0.0;
    for (int64_t r = 0; r < heldout.rows(); ++r) {
      const auto fwd = m.apply(heldout.x_a.row(r));
      const auto back = m.apply_inverse(fwd.data());
      for (int64_t i = 0; i < 4; ++i) {
        const double d = back[i] - heldout.x_a.at(r, i);
        total += d * d;
      }
    }
    return total / static_cast<double>(heldout.rows());
  };
  CHECK(round_trip(joint) <= round_trip(plain) + 1e-9);
}

TEST_CASE("stitch on toy pairs recovers the bank transform directions") {
  ToyConfig c;
  c.n_concepts = 96;
  c.d_act = 24;
  c.r_exclusive = 0.1;
  c.sigma_noise = 0.0;
  const ConceptBank bank = build_concept_bank(c, 19);
  ToyBatchSource stream(bank, 512, 0.0, derive_seed(19, SeedDomain::Stitch));
  std::vector<ActivationPairBatch> train;
  for (int i = 0; i < 40; ++i) train.push_back(stream.next());
  const ActivationPairBatch heldout = stream.next();
  const StitchMap map = fit_stitch(train, heldout, 1e-8, 0.0, false);
  std::vector<double> cosines;
  for (int64_t i = 0; i < c.n_concepts; ++i) {
    if (bank.partition[i] != ConceptClass::Shared) continue;
    const auto mapped = map.map_direction(bank.concepts.row(i));
    const double mn = l2_norm(mapped.data(), c.d_act);
    const double cn = l2_norm(bank.concepts_b.row(i), c.d_act);
    cosines.push_back(dot(mapped.data(), bank.concepts_b.row(i), c.d_act) / (mn * cn));
  }
  CHECK(median(cosines) > 0.9);
}

namespace {

// Three shared features with hand-picked decoders for the arithmetic oracle.
CrosscoderModel three_feature_model() {
  CrosscoderModel m =
      init_model(Arch::Standard, 3, 3, 3, 1, PartitionLayout::standard(3), 0.4, 1);
  m.w_dec_a.set_zero();
  m.w_dec_b.set_zero();
  // Orthogonal unit decoders in A.
  m.w_dec_a.at(0, 0) = 1.0;
  m.w_dec_a.at(1, 1) = 1.0;
  m.w_dec_a.at(2, 2) = 1.0;
  // Arbitrary decoders in B.
  m.w_dec_b.at(0, 0) = 2.0;
  m.w_dec_b.at(1, 1) = 4.0;
  m.w_dec_b.at(2, 0) = 1.0;
  m.w_dec_b.at(2, 1) = 1.0;
  return m;
}

}  // namespace

TEST_CASE("transfer_vector matches the hand-computed weighted average") {
  const CrosscoderModel m = three_feature_model();
  // v_a aligned with features 0 and 1: cos0 = 3/5, cos1 = 4/5, feature 2 = 0.
  const std::vector<double> v_a = {0.6, 0.8, 0.0};
  const auto v_b = transfer_vector(m, v_a, 2);
  // weighted avg: (0.6 * [2,0,0] + 0.8 * [0,4,0]) / 1.4 = [6/7, 16/7, 0]
  // rescaled to ||v_a|| = 1.
  const double norm = std::sqrt(36.0 / 49.0 + 256.0 / 49.0);
  CHECK(v_b[0] == doctest::Approx((6.0 / 7.0) / norm));
  CHECK(v_b[1] == doctest::Approx((16.0 / 7.0) / norm));
  CHECK(v_b[2] == doctest::Approx(0.0));
}

TEST_CASE("transfer with n = 1 returns the best feature's B decoder rescaled") {
  const CrosscoderModel m = three_feature_model();
  const std::vector<double> v_a = {0.0, 2.0, 0.0};  // exactly feature 1
  const auto v_b = transfer_vector(m, v_a, 1);
  CHECK(v_b[0] == doctest::Approx(0.0));
  CHECK(v_b[1] == doctest::Approx(2.0));  // direction of d_1^B, norm ||v_a|| = 2
  CHECK(v_b[2] == doctest::Approx(0.0));
}

TEST_CASE("transfer scales linearly with the input norm") {
  const CrosscoderModel m = three_feature_model();
  const std::vector<double> v1 = {0.6, 0.8, 0.0};
  std::vector<double> v3 = v1;
  for (double& v : v3) v *= 3.0;
  const auto t1 = transfer_vector(m, v1, 2);
  const auto t3 = transfer_vector(m, v3, 2);
  for (int64_t i = 0; i < 3; ++i) CHECK(t3[i] == doctest::Approx(3.0 * t1[i]).epsilon(1e-12));
}

TEST_CASE("transfer restricted to the shared partition and live features") {
  CrosscoderModel m =
      init_model(Arch::DFC, 3, 3, 4, 1, PartitionLayout::dfc(4, 1, 1), 0.4, 2);
  m.w_dec_a.set_zero();
  m.w_dec_b.set_zero();
  m.enforce_structural_zeros();
  // The A-exclusive feature 0 is perfectly aligned with v_a but out of scope.
  m.w_dec_a.at(0, 0) = 1.0;
  m.w_dec_a.at(2, 0) = 0.5;
  m.w_dec_a.at(2, 1) = 0.5;
  m.w_dec_b.at(2, 2) = 1.0;
  m.w_dec_a.at(3, 0) = 0.2;
  m.w_dec_a.at(3, 1) = 1.0;
  m.w_dec_b.at(3, 0) = 1.0;
  const std::vector<double> v_a = {1.0, 0.0, 0.0};
  const auto v_b = transfer_vector(m, v_a, 1);
  // Best shared feature is 2 (cos = 1/sqrt(2)); its B decoder is e_2.
  CHECK(v_b[2] == doctest::Approx(1.0));
  // Dead-listing feature 2 falls back to feature 3, whose B decoder is e_0.
  const auto v_b2 = transfer_vector(m, v_a, 1, {2});
  CHECK(v_b2[0] == doctest::Approx(1.0));
  CHECK(v_b2[2] == doctest::Approx(0.0));
}

TEST_CASE("transfer with no positively aligned features is an error") {
  const CrosscoderModel m = three_feature_model();
  const std::vector<double> v_a = {-1.0, -1.0, -1.0};
  CHECK_THROWS_AS(transfer_vector(m, v_a, 2), numeric_error);
  CHECK_THROWS_AS(transfer_vector(m, std::vector<double>(3, 0.0), 2), numeric_error);
}

namespace {

// Identity stitch over an identity-transform bank: concepts_b rows equal
// concepts rows for shared concepts, so geometry is fully transparent.
struct ProxyRig {
  ConceptBank bank;
  StitchMap stitch;
  CrosscoderModel model;
};

ProxyRig proxy_rig() {
  ToyConfig c;
  c.n_concepts = 16;
  c.d_act = 8;
  c.r_exclusive = 0.25;
  c.identity_transform = true;
  c.tau = 0.0;
  ProxyRig rig{build_concept_bank(c, 23), {}, {}};
  rig.stitch.w = Mat(8, 8);
  rig.stitch.w_inv = Mat(8, 8);
  for (int64_t i = 0; i < 8; ++i) {
    rig.stitch.w.at(i, i) = 1.0;
    rig.stitch.w_inv.at(i, i) = 1.0;
  }
  rig.stitch.b.assign(8, 0.0);
  rig.stitch.b_inv.assign(8, 0.0);
  rig.stitch.has_inverse = true;
  rig.model = init_model(Arch::DFC, 8, 8, 6, 2, PartitionLayout::dfc(6, 1, 1), 0.4, 24);
  rig.model.w_dec_a.set_zero();
  rig.model.w_dec_b.set_zero();
  rig.model.enforce_structural_zeros();
  return rig;
}

}  // namespace

TEST_CASE("proxy score maps perfect alignment to 1 and no alignment to 5") {
  ProxyRig rig = proxy_rig();
  int64_t shared_concept = -1;
  for (int64_t i = 0; i < rig.bank.cfg.n_concepts; ++i) {
    if (rig.bank.partition[i] == ConceptClass::Shared) {
      shared_concept = i;
      break;
    }
  }
  REQUIRE(shared_concept >= 0);
  // Shared feature 2 carries the concept exactly: T(d) = d = c''_j, cos* = 1.
  for (int64_t i = 0; i < 8; ++i) {
    rig.model.w_dec_a.at(2, i) = rig.bank.concepts.at(shared_concept, i);
    rig.model.w_dec_b.at(2, i) = rig.bank.concepts.at(shared_concept, i);
  }
  CHECK(exclusivity_proxy(rig.model, rig.stitch, 2, rig.bank) == doctest::Approx(1.0));

  // A direction anti-aligned with every observable concept scores 5.
  std::vector<double> anti(8, 0.0);
  for (int64_t i = 0; i < rig.bank.cfg.n_concepts; ++i) {
    if (!rig.bank.observable_b(i)) continue;
    for (int64_t j = 0; j < 8; ++j) anti[j] -= rig.bank.concepts_b.at(i, j);
  }
  bool all_nonpositive = true;
  for (int64_t i = 0; i < rig.bank.cfg.n_concepts; ++i) {
    if (!rig.bank.observable_b(i)) continue;
    if (dot(anti.data(), rig.bank.concepts_b.row(i), 8) > 0.0) all_nonpositive = false;
  }
  if (all_nonpositive) {
    for (int64_t i = 0; i < 8; ++i) {
      rig.model.w_dec_a.at(3, i) = anti[i];
      rig.model.w_dec_b.at(3, i) = anti[i];
    }
    CHECK(exclusivity_proxy(rig.model, rig.stitch, 3, rig.bank) == doctest::Approx(5.0));
  }
}

TEST_CASE("proxy is invariant to positive decoder rescaling and routes B-side features") {
  ProxyRig rig = proxy_rig();
  rig.model.w_dec_a.at(0, 0) = 0.4;  // A-exclusive feature (index 0)
  rig.model.w_dec_b.at(1, 1) = 0.4;  // B-exclusive feature (index 1)
  const double a_score = exclusivity_proxy(rig.model, rig.stitch, 0, rig.bank);
  const double b_score = exclusivity_proxy(rig.model, rig.stitch, 1, rig.bank);
  CHECK(a_score >= 1.0);
  CHECK(a_score <= 5.0);
  CHECK(b_score >= 1.0);
  for (int64_t i = 0; i < 8; ++i) rig.model.w_dec_a.at(0, i) *= 12.0;
  CHECK(exclusivity_proxy(rig.model, rig.stitch, 0, rig.bank) == doctest::Approx(a_score));
  // Dead feature (index 4: both decoders zero) is undefined.
  CHECK_THROWS_AS(exclusivity_proxy(rig.model, rig.stitch, 4, rig.bank), undefined_feature_error);
  // Without an inverse map, B-side scoring is rejected.
  StitchMap no_inv = rig.stitch;
  no_inv.has_inverse = false;
  CHECK_THROWS_AS(exclusivity_proxy(rig.model, no_inv, 1, rig.bank), config_error);
}
