#include "crossdiff/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "crossdiff/errors.hpp"

namespace crossdiff {

const char* feature_class_name(FeatureClass c) {
  switch (c) {
    case FeatureClass::Shared: return "shared";
    case FeatureClass::AExclusive: return "a_exclusive";
    case FeatureClass::BExclusive: return "b_exclusive";
    case FeatureClass::Dead: return "dead";
  }
  return "?";
}

std::vector<Match> match_concepts(const CrosscoderModel& model, const ConceptBank& bank,
                                  double theta_recovery) {
  if (theta_recovery <= 0.0 || theta_recovery >= 1.0)
    throw config_error("match_concepts: theta_recovery must be in (0, 1)");
  if (bank.cfg.d_act != model.d_a || bank.cfg.d_act != model.d_b)
    throw shape_error("match_concepts: bank dimension does not match model");

  const int64_t n = bank.cfg.n_concepts;
  const int64_t M = model.dict_size;

  Mat dots_a, dots_b;
  kern::matmul_nt(bank.concepts, model.w_dec_a, dots_a);
  kern::matmul_nt(bank.concepts_b, model.w_dec_b, dots_b);

  std::vector<double> norm_ca, norm_cb, norm_da, norm_db;
  kern::row_norms(bank.concepts, norm_ca);
  kern::row_norms(bank.concepts_b, norm_cb);
  kern::row_norms(model.w_dec_a, norm_da);
  kern::row_norms(model.w_dec_b, norm_db);

  std::vector<Match> out;
  for (int64_t i = 0; i < n; ++i) {
    const ConceptClass cls = bank.partition[i];
    const bool frame_a = cls != ConceptClass::BExclusive;
    const bool frame_b = cls != ConceptClass::AExclusive;
    for (int64_t j = 0; j < M; ++j) {
      double best = -2.0;
      if (frame_a && norm_ca[i] > 0.0 && norm_da[j] > 0.0) {
        best = std::max(best, dots_a.at(i, j) / (norm_ca[i] * norm_da[j]));
      }
      if (frame_b && norm_cb[i] > 0.0 && norm_db[j] > 0.0) {
        best = std::max(best, dots_b.at(i, j) / (norm_cb[i] * norm_db[j]));
      }
      if (best > theta_recovery) {
        out.push_back({static_cast<int32_t>(j), static_cast<int32_t>(i), best, cls});
      }
    }
  }
  return out;
}

std::vector<FeatureClass> classify_features(const CrosscoderModel& model, double theta_low,
                                            double theta_high, const std::vector<int32_t>& dead) {
  if (!(0.0 < theta_low && theta_low < theta_high && theta_high < 1.0))
    throw config_error("classify_features: need 0 < theta_low < theta_high < 1");
  std::vector<FeatureClass> out(model.dict_size, FeatureClass::Shared);
  std::vector<uint8_t> is_dead(model.dict_size, 0);
  for (int32_t j : dead) is_dead[j] = 1;
  for (int64_t j = 0; j < model.dict_size; ++j) {
    if (is_dead[j]) {
      out[j] = FeatureClass::Dead;
      continue;
    }
    double r;
    try {
      r = relative_decoder_norm(model, j);
    } catch (const undefined_feature_error&) {
      out[j] = FeatureClass::Dead;
      continue;
    }
    if (model.arch == Arch::DFC) {
      if (model.layout.a_exclusive.contains(j)) {
        if (r != 1.0) throw numeric_error("DFC A-exclusive feature with R != 1");
        out[j] = FeatureClass::AExclusive;
        continue;
      }
      if (model.layout.b_exclusive.contains(j)) {
        if (r != 0.0) throw numeric_error("DFC B-exclusive feature with R != 0");
        out[j] = FeatureClass::BExclusive;
        continue;
      }
    }
    if (r > theta_high) {
      out[j] = FeatureClass::AExclusive;
    } else if (r < theta_low) {
      out[j] = FeatureClass::BExclusive;
    } else {
      out[j] = FeatureClass::Shared;
    }
  }
  return out;
}

void recovery_and_fp(const std::vector<Match>& matches, const std::vector<FeatureClass>& classes,
                     const ConceptBank& bank, EvalReport& report) {
  const int64_t n = bank.cfg.n_concepts;
  std::vector<uint8_t> recovered(n, 0);
  for (const Match& m : matches) recovered[m.concept_idx] = 1;

  int64_t n_shared = 0, n_a = 0, n_b = 0;
  int64_t rec_shared = 0, rec_a = 0, rec_b = 0, rec_total = 0;
  for (int64_t i = 0; i < n; ++i) {
    switch (bank.partition[i]) {
      case ConceptClass::Shared: n_shared++; rec_shared += recovered[i]; break;
      case ConceptClass::AExclusive: n_a++; rec_a += recovered[i]; break;
      case ConceptClass::BExclusive: n_b++; rec_b += recovered[i]; break;
    }
    rec_total += recovered[i];
  }
  auto rate = [](int64_t num, int64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  report.recovery_total = rate(rec_total, n);
  report.recovery_shared = rate(rec_shared, n_shared);
  report.recovery_a_excl = rate(rec_a, n_a);
  report.recovery_b_excl = rate(rec_b, n_b);
  report.recovery_excl_combined = rate(rec_a + rec_b, n_a + n_b);

  // Per-feature matched-concept classes.
  std::vector<uint8_t> matched_any(classes.size(), 0);
  std::vector<uint8_t> matched_own(classes.size(), 0);
  for (const Match& m : matches) {
    matched_any[m.feature] = 1;
    const FeatureClass fc = classes[m.feature];
    if ((fc == FeatureClass::AExclusive && m.category == ConceptClass::AExclusive) ||
        (fc == FeatureClass::BExclusive && m.category == ConceptClass::BExclusive)) {
      matched_own[m.feature] = 1;
    }
  }

  report.exclusive_classified = 0;
  report.fp_shared_as_exclusive = 0;
  report.fp_no_concept = 0;
  for (size_t j = 0; j < classes.size(); ++j) {
    if (classes[j] != FeatureClass::AExclusive && classes[j] != FeatureClass::BExclusive) continue;
    report.exclusive_classified++;
    if (matched_own[j]) continue;
    if (matched_any[j]) {
      report.fp_shared_as_exclusive++;
    } else {
      report.fp_no_concept++;
    }
  }
  if (report.exclusive_classified > 0) {
    report.false_positive_rate =
        static_cast<double>(report.fp_shared_as_exclusive + report.fp_no_concept) /
        static_cast<double>(report.exclusive_classified);
  } else {
    report.false_positive_rate = std::nullopt;
  }
}

std::pair<double, double> fve(const CrosscoderModel& model, BatchSource& heldout, int64_t rows,
                              double scale_a, double scale_b) {
  if (rows < 1) throw config_error("fve: rows must be >= 1");
  double mse_a = 0.0, mse_b = 0.0;
  double sq_a = 0.0, sq_b = 0.0;
  std::vector<double> sum_a(model.d_a, 0.0), sum_b(model.d_b, 0.0);
  int64_t seen = 0;
  while (seen < rows) {
    ActivationPairBatch batch = heldout.next();
    const int64_t take = std::min<int64_t>(batch.rows(), rows - seen);
    Mat xa(take, model.d_a), xb(take, model.d_b);
    for (int64_t r = 0; r < take; ++r) {
      for (int64_t c = 0; c < model.d_a; ++c) xa.at(r, c) = batch.x_a.at(r, c) * scale_a;
      for (int64_t c = 0; c < model.d_b; ++c) xb.at(r, c) = batch.x_b.at(r, c) * scale_b;
    }
    ForwardTrace t = forward(model, xa, xb, model.k);
    for (int64_t r = 0; r < take; ++r) {
      const double* a = xa.row(r);
      const double* ra = t.recon_a.row(r);
      for (int64_t c = 0; c < model.d_a; ++c) {
        const double d = a[c] - ra[c];
        mse_a += d * d;
        sum_a[c] += a[c];
        sq_a += a[c] * a[c];
      }
      const double* b = xb.row(r);
      const double* rb = t.recon_b.row(r);
      for (int64_t c = 0; c < model.d_b; ++c) {
        const double d = b[c] - rb[c];
        mse_b += d * d;
        sum_b[c] += b[c];
        sq_b += b[c] * b[c];
      }
    }
    seen += take;
  }
  double var_a = sq_a, var_b = sq_b;
  for (double s : sum_a) var_a -= s * s / static_cast<double>(seen);
  for (double s : sum_b) var_b -= s * s / static_cast<double>(seen);
  if (var_a <= 0.0 || var_b <= 0.0) throw numeric_error("fve: zero-variance input");
  return {1.0 - mse_a / var_a, 1.0 - mse_b / var_b};
}

std::vector<int64_t> relative_norm_histogram(const CrosscoderModel& model,
                                             const std::vector<FeatureClass>& classes,
                                             int64_t bins) {
  std::vector<int64_t> hist(bins, 0);
  for (int64_t j = 0; j < model.dict_size; ++j) {
    if (classes[j] == FeatureClass::Dead) continue;
    const double r = relative_decoder_norm(model, j);
    const int64_t bin = std::min<int64_t>(bins - 1, static_cast<int64_t>(r * static_cast<double>(bins)));
    hist[bin]++;
  }
  return hist;
}

EvalReport evaluate(const CrosscoderModel& model, const ConceptBank& bank,
                    const EvalThresholds& th, const std::vector<int32_t>& dead,
                    BatchSource* heldout, int64_t heldout_rows, double scale_a, double scale_b) {
  EvalReport rep;
  rep.matches = match_concepts(model, bank, th.theta_recovery);
  rep.classes = classify_features(model, th.theta_low, th.theta_high, dead);
  recovery_and_fp(rep.matches, rep.classes, bank, rep);
  rep.relative_norm_histogram = relative_norm_histogram(model, rep.classes);
  rep.dead_fraction = static_cast<double>(dead.size()) / static_cast<double>(model.dict_size);
  if (heldout && heldout_rows > 0) {
    auto [fa, fb] = fve(model, *heldout, heldout_rows, scale_a, scale_b);
    rep.fve_a = fa;
    rep.fve_b = fb;
  }
  return rep;
}

std::vector<RecoveryPoint> recovery_curve(
    const std::vector<std::pair<int64_t, CrosscoderModel>>& checkpoints, const ConceptBank& bank,
    const EvalThresholds& th) {
  std::vector<RecoveryPoint> out;
  for (const auto& [step, model] : checkpoints) {
    EvalReport rep;
    rep.matches = match_concepts(model, bank, th.theta_recovery);
    rep.classes = classify_features(model, th.theta_low, th.theta_high, {});
    recovery_and_fp(rep.matches, rep.classes, bank, rep);
    out.push_back({step, rep.recovery_shared, rep.recovery_a_excl, rep.recovery_b_excl,
                   rep.false_positive_rate});
  }
  return out;
}

}  // namespace crossdiff
