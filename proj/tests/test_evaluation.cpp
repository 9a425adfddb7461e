#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "crossdiff/errors.hpp"
#include "crossdiff/evaluation.hpp"
#include "crossdiff/rng.hpp"

using namespace crossdiff;

namespace {

ConceptBank small_bank(uint64_t seed, int64_t n = 32, int64_t d = 16, double r_excl = 0.25) {
  ToyConfig c;
  c.n_concepts = n;
  c.d_act = d;
  c.r_exclusive = r_excl;
  c.corr_rank = 4;
  return build_concept_bank(c, seed);
}

CrosscoderModel blank_model(int64_t d, int64_t M, Arch arch = Arch::Standard,
                            PartitionLayout layout = {}) {
  if (layout.dict_size == 0) layout = PartitionLayout::standard(M);
  CrosscoderModel m = init_model(arch, d, d, M, 1, layout, 0.4, 1);
  m.w_dec_a.set_zero();
  m.w_dec_b.set_zero();
  m.enforce_structural_zeros();
  return m;
}

void set_row(Mat& w, int64_t j, const double* src, int64_t d, double scale) {
  for (int64_t i = 0; i < d; ++i) w.at(j, i) = scale * src[i];
}

}  // namespace

TEST_CASE("a decoder row equal to a concept recovers it") {
  const ConceptBank bank = small_bank(3);
  CrosscoderModel m = blank_model(16, 8);
  set_row(m.w_dec_a, 0, bank.concepts.row(5), 16, 0.4);
  const auto matches = match_concepts(m, bank, 0.8);
  bool found = false;
  for (const Match& mt : matches) {
    if (mt.feature == 0 && mt.concept_idx == 5) {
      found = true;
      CHECK(mt.cosine == doctest::Approx(1.0));
    }
  }
  CHECK(found);
}

TEST_CASE("matching respects the observable frame per category") {
  const ConceptBank bank = small_bank(4);
  int64_t a_excl = -1, b_excl = -1;
  for (int64_t i = 0; i < bank.cfg.n_concepts; ++i) {
    if (bank.partition[i] == ConceptClass::AExclusive && a_excl < 0) a_excl = i;
    if (bank.partition[i] == ConceptClass::BExclusive && b_excl < 0) b_excl = i;
  }
  REQUIRE(a_excl >= 0);
  REQUIRE(b_excl >= 0);
  CrosscoderModel m = blank_model(16, 8);
  // Feature 0 carries the A-exclusive concept in the B decoder only: that
  // frame never matches an A-exclusive concept.
  set_row(m.w_dec_b, 0, bank.concepts.row(a_excl), 16, 1.0);
  // Feature 1 carries the B-frame image of the B-exclusive concept.
  set_row(m.w_dec_b, 1, bank.concepts_b.row(b_excl), 16, 1.0);
  const auto matches = match_concepts(m, bank, 0.8);
  for (const Match& mt : matches) CHECK(!(mt.feature == 0 && mt.concept_idx == a_excl));
  bool found = false;
  for (const Match& mt : matches) found |= mt.feature == 1 && mt.concept_idx == b_excl;
  CHECK(found);
}

TEST_CASE("random features produce no spurious matches at theta 0.8") {
  // Cosines of random 256-d unit vectors concentrate near 0 (sd ~ 1/16), so
  // 0.8 sits more than 12 sigma out; a million random pairs stay silent.
  ToyConfig c;
  c.n_concepts = 1000;
  c.d_act = 256;
  c.r_exclusive = 0.0;
  const ConceptBank bank = build_concept_bank(c, 9);
  CrosscoderModel m = blank_model(256, 1000);
  Rng rng(10);
  for (double& v : m.w_dec_a.data) v = rng.next_gaussian();
  for (double& v : m.w_dec_b.data) v = rng.next_gaussian();
  CHECK(match_concepts(m, bank, 0.8).empty());
}

TEST_CASE("classification thresholds") {
  CrosscoderModel m = blank_model(16, 4);
  auto with_r = [&](int64_t j, double r) {
    m.w_dec_a.at(j, 0) = r;
    m.w_dec_b.at(j, 1) = 1.0 - r;
  };
  with_r(0, 0.85);
  with_r(1, 0.5);
  with_r(2, 0.1);
  with_r(3, 0.5);
  const auto classes = classify_features(m, 0.2, 0.8, {3});
  CHECK(classes[0] == FeatureClass::AExclusive);
  CHECK(classes[1] == FeatureClass::Shared);
  CHECK(classes[2] == FeatureClass::BExclusive);
  CHECK(classes[3] == FeatureClass::Dead);
}

TEST_CASE("DFC partition features classify by construction with R in {0,1}") {
  CrosscoderModel m = blank_model(16, 8, Arch::DFC, PartitionLayout::dfc(8, 2, 2));
  m.w_dec_a.at(0, 0) = 0.4;   // A-exclusive, live
  m.w_dec_b.at(2, 0) = 0.4;   // B-exclusive, live
  m.w_dec_a.at(4, 0) = 0.3;   // shared
  m.w_dec_b.at(4, 1) = 0.3;
  const auto classes = classify_features(m, 0.2, 0.8, {});
  CHECK(classes[0] == FeatureClass::AExclusive);
  CHECK(classes[2] == FeatureClass::BExclusive);
  CHECK(classes[4] == FeatureClass::Shared);
  CHECK(classes[1] == FeatureClass::Dead);  // zero decoders
  CHECK(relative_decoder_norm(m, 0) == 1.0);
  CHECK(relative_decoder_norm(m, 2) == 0.0);
}

TEST_CASE("classification is invariant to a common positive rescale") {
  CrosscoderModel m = blank_model(16, 2);
  m.w_dec_a.at(0, 0) = 0.9;
  m.w_dec_b.at(0, 1) = 0.1;
  const auto before = classify_features(m, 0.2, 0.8, {});
  for (double& v : m.w_dec_a.data) v *= 37.5;
  for (double& v : m.w_dec_b.data) v *= 37.5;
  const auto after = classify_features(m, 0.2, 0.8, {});
  CHECK(before == after);
}

// Independent oracle: exhaustive cosine enumeration plus literal set logic,
// sharing no code with the production metrics.
namespace oracle {

struct Out {
  std::set<int64_t> recovered_concepts;
  int64_t rec_shared = 0, rec_a = 0, rec_b = 0;
  int64_t excl_classified = 0, fp_shared = 0, fp_none = 0;
};

double cosine(const double* a, const double* b, int64_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (int64_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return -2.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

Out run(const CrosscoderModel& m, const ConceptBank& bank, double theta, double lo, double hi,
        const std::set<int64_t>& dead) {
  Out out;
  const int64_t n = bank.cfg.n_concepts;
  const int64_t d = bank.cfg.d_act;
  // recovered(i, j) over both frames
  std::vector<std::vector<bool>> rec(n, std::vector<bool>(m.dict_size, false));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m.dict_size; ++j) {
      bool r = false;
      if (bank.partition[i] != ConceptClass::BExclusive) {
        r |= cosine(bank.concepts.row(i), m.w_dec_a.row(j), d) > theta;
      }
      if (bank.partition[i] != ConceptClass::AExclusive) {
        r |= cosine(bank.concepts_b.row(i), m.w_dec_b.row(j), d) > theta;
      }
      rec[i][j] = r;
    }
  }
  for (int64_t i = 0; i < n; ++i) {
    bool any = false;
    for (int64_t j = 0; j < m.dict_size; ++j) any |= rec[i][j];
    if (!any) continue;
    out.recovered_concepts.insert(i);
    switch (bank.partition[i]) {
      case ConceptClass::Shared: out.rec_shared++; break;
      case ConceptClass::AExclusive: out.rec_a++; break;
      case ConceptClass::BExclusive: out.rec_b++; break;
    }
  }
  for (int64_t j = 0; j < m.dict_size; ++j) {
    if (dead.count(j)) continue;
    double na = 0, nb = 0;
    for (int64_t i = 0; i < d; ++i) {
      na += m.w_dec_a.at(j, i) * m.w_dec_a.at(j, i);
      nb += m.w_dec_b.at(j, i) * m.w_dec_b.at(j, i);
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na == 0.0 && nb == 0.0) continue;
    const double r = na / (na + nb);
    int claimed = 0;  // 1 = A, 2 = B
    if (r > hi) claimed = 1;
    if (r < lo) claimed = 2;
    if (claimed == 0) continue;
    out.excl_classified++;
    bool own = false, any = false;
    for (int64_t i = 0; i < n; ++i) {
      if (!rec[i][j]) continue;
      any = true;
      if (claimed == 1 && bank.partition[i] == ConceptClass::AExclusive) own = true;
      if (claimed == 2 && bank.partition[i] == ConceptClass::BExclusive) own = true;
    }
    if (own) continue;
    if (any) {
      out.fp_shared++;
    } else {
      out.fp_none++;
    }
  }
  return out;
}

}  // namespace oracle

TEST_CASE("metrics equal exhaustive brute-force enumeration on randomized instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    CAPTURE(trial);
    const int64_t n = 8 + static_cast<int64_t>(rng.next_u64() % 57);   // 8..64
    const int64_t d = 8 + static_cast<int64_t>(rng.next_u64() % 25);   // 8..32
    const int64_t M = 4 + static_cast<int64_t>(rng.next_u64() % 125);  // 4..128
    ToyConfig c;
    c.n_concepts = n;
    c.d_act = d;
    c.r_exclusive = 0.3;
    c.corr_rank = 3;
    const ConceptBank bank = build_concept_bank(c, 1000 + trial);

    CrosscoderModel m = blank_model(d, M);
    // Mix of planted concept rows (clean or noisy), random rows and zeros in
    // either decoder independently.
    for (int64_t j = 0; j < M; ++j) {
      const uint64_t kind = rng.next_u64() % 5;
      const int64_t cidx = static_cast<int64_t>(rng.next_u64() % n);
      const double scale = 0.2 + rng.next_double();
      if (kind == 0) {
        set_row(m.w_dec_a, j, bank.concepts.row(cidx), d, scale);
      } else if (kind == 1) {
        set_row(m.w_dec_b, j, bank.concepts_b.row(cidx), d, scale);
      } else if (kind == 2) {
        set_row(m.w_dec_a, j, bank.concepts.row(cidx), d, scale);
        if (bank.observable_b(cidx)) {
          set_row(m.w_dec_b, j, bank.concepts_b.row(cidx), d, scale);
        }
      } else if (kind == 3) {
        for (int64_t i = 0; i < d; ++i) {
          m.w_dec_a.at(j, i) = rng.next_gaussian();
          m.w_dec_b.at(j, i) = rng.next_gaussian();
        }
      }  // kind 4: both rows zero (dead by norm)
    }
    std::set<int64_t> dead_set;
    std::vector<int32_t> dead_vec;
    for (int64_t j = 0; j < M; ++j) {
      if (rng.next_double() < 0.1) {
        dead_set.insert(j);
        dead_vec.push_back(static_cast<int32_t>(j));
      }
    }

    const auto matches = match_concepts(m, bank, 0.8);
    const auto classes = classify_features(m, 0.2, 0.8, dead_vec);
    EvalReport rep;
    recovery_and_fp(matches, classes, bank, rep);
    const oracle::Out expect = oracle::run(m, bank, 0.8, 0.2, 0.8, dead_set);

    std::set<int64_t> got_concepts;
    for (const Match& mt : matches) got_concepts.insert(mt.concept_idx);
    CHECK(got_concepts == expect.recovered_concepts);
    CHECK(rep.exclusive_classified == expect.excl_classified);
    CHECK(rep.fp_shared_as_exclusive == expect.fp_shared);
    CHECK(rep.fp_no_concept == expect.fp_none);
    const int64_t n_sh = bank.count(ConceptClass::Shared);
    const int64_t n_a = bank.count(ConceptClass::AExclusive);
    const int64_t n_b = bank.count(ConceptClass::BExclusive);
    if (n_sh > 0) {
      CHECK(*rep.recovery_shared == static_cast<double>(expect.rec_shared) / n_sh);
    }
    if (n_a > 0) CHECK(*rep.recovery_a_excl == static_cast<double>(expect.rec_a) / n_a);
    if (n_b > 0) CHECK(*rep.recovery_b_excl == static_cast<double>(expect.rec_b) / n_b);
    // FP buckets partition the false-positive set.
    if (rep.exclusive_classified > 0) {
      CHECK(*rep.false_positive_rate ==
            static_cast<double>(rep.fp_shared_as_exclusive + rep.fp_no_concept) /
                rep.exclusive_classified);
    } else {
      CHECK(!rep.false_positive_rate.has_value());
    }
  }
}

TEST_CASE("raising the recovery threshold never increases recovery") {
  const ConceptBank bank = small_bank(21);
  CrosscoderModel m = blank_model(16, 32);
  Rng rng(22);
  for (int64_t j = 0; j < 32; ++j) {
    const int64_t cidx = static_cast<int64_t>(rng.next_u64() % 32);
    for (int64_t i = 0; i < 16; ++i) {
      m.w_dec_a.at(j, i) = bank.concepts.at(cidx, i) + 0.3 * rng.next_gaussian();
      m.w_dec_b.at(j, i) = bank.concepts_b.at(cidx, i) + 0.3 * rng.next_gaussian();
    }
  }
  size_t prev = SIZE_MAX;
  for (double theta : {0.5, 0.6, 0.7, 0.8, 0.9}) {
    std::set<int64_t> got;
    for (const Match& mt : match_concepts(m, bank, theta)) got.insert(mt.concept_idx);
    CHECK(got.size() <= prev);
    prev = got.size();
  }
  // Widening the shared band never increases the exclusive-classified count.
  int64_t prev_excl = INT64_MAX;
  for (double band : {0.45, 0.3, 0.2, 0.1, 0.05}) {
    const auto classes = classify_features(m, band, 1.0 - band, {});
    int64_t excl = 0;
    for (FeatureClass c : classes) {
      excl += c == FeatureClass::AExclusive || c == FeatureClass::BExclusive;
    }
    CHECK(excl <= prev_excl);
    prev_excl = excl;
  }
}

namespace {

class FixedSource final : public BatchSource {
public:
  explicit FixedSource(ActivationPairBatch b) : batch_(std::move(b)) {}
  ActivationPairBatch next() override { return batch_; }
  int64_t d_a() const override { return batch_.x_a.cols; }
  int64_t d_b() const override { return batch_.x_b.cols; }

private:
  ActivationPairBatch batch_;
};

}  // namespace

TEST_CASE("FVE is 1 for perfect reconstruction and 0 at the mean") {
  const int64_t d = 6, M = 12;
  // Plus/minus axis decoders with tied encoders reconstruct any input exactly
  // once k = M.
  CrosscoderModel m = blank_model(d, M);
  for (int64_t i = 0; i < d; ++i) {
    m.w_dec_a.at(i, i) = 1.0;
    m.w_dec_a.at(d + i, i) = -1.0;
    m.w_dec_b.at(i, i) = 1.0;
    m.w_dec_b.at(d + i, i) = -1.0;
  }
  m.w_enc_a = m.w_dec_a;
  m.w_enc_b = m.w_dec_b;
  m.k = M;
  Rng rng(31);
  ActivationPairBatch data;
  data.x_a = Mat(64, d);
  data.x_b = Mat(64, d);
  for (double& v : data.x_a.data) v = rng.next_gaussian();
  data.x_b.data = data.x_a.data;
  FixedSource src(data);
  const auto [fa, fb] = fve(m, src, 64, 1.0, 1.0);
  CHECK(fa == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fb == doctest::Approx(1.0).epsilon(1e-9));

  // Zero decoders with the column mean as decoder bias: FVE = 0.
  CrosscoderModel zero = blank_model(d, M);
  zero.k = 1;
  for (int64_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int64_t r = 0; r < 64; ++r) mean += data.x_a.at(r, c);
    zero.b_dec_a[c] = mean / 64.0;
    zero.b_dec_b[c] = mean / 64.0;
  }
  FixedSource src2(data);
  const auto [za, zb] = fve(zero, src2, 64, 1.0, 1.0);
  CHECK(za == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(zb == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("FVE raises a metric error on zero-variance input") {
  const int64_t d = 4;
  CrosscoderModel m = blank_model(d, 4);
  m.k = 1;
  ActivationPairBatch data;
  data.x_a = Mat(8, d);
  data.x_b = Mat(8, d);
  for (int64_t r = 0; r < 8; ++r) {
    for (int64_t c = 0; c < d; ++c) {
      data.x_a.at(r, c) = 1.0;  // constant rows: zero variance about the mean
      data.x_b.at(r, c) = 1.0;
    }
  }
  FixedSource src(data);
  CHECK_THROWS_AS(fve(m, src, 8, 1.0, 1.0), numeric_error);
}

TEST_CASE("histogram covers live features over 50 bins") {
  CrosscoderModel m = blank_model(8, 10);
  for (int64_t j = 0; j < 9; ++j) {
    m.w_dec_a.at(j, 0) = static_cast<double>(j) / 8.0 + 1e-3;
    m.w_dec_b.at(j, 1) = 1.0 - static_cast<double>(j) / 8.0;
  }
  const auto classes = classify_features(m, 0.2, 0.8, {});
  const auto hist = relative_norm_histogram(m, classes);
  CHECK(hist.size() == 50);
  int64_t total = 0;
  for (int64_t c : hist) total += c;
  CHECK(total == 9);  // feature 9 has zero decoders and is excluded
}

TEST_CASE("recovery curve emits one row per checkpoint and starts near zero") {
  const ConceptBank bank = small_bank(41);
  std::vector<std::pair<int64_t, CrosscoderModel>> ckpts;
  ckpts.emplace_back(0, init_model(Arch::Standard, 16, 16, 32, 4, PartitionLayout::standard(32),
                                   0.4, 99));
  const auto curve = recovery_curve(ckpts, bank, {0.8, 0.2, 0.8});
  REQUIRE(curve.size() == 1);
  CHECK(curve[0].step == 0);
  // Random 16-d decoder rows against 0.8: spurious recovery is possible in
  // principle but the rates stay near zero.
  CHECK(*curve[0].shared <= 0.05);
}
