#include "crossdiff/transfer.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "crossdiff/errors.hpp"

namespace crossdiff {

namespace {

using EMat = Eigen::MatrixXd;
using EVec = Eigen::VectorXd;

EMat concat_to_eigen(const std::vector<ActivationPairBatch>& batches, bool model_a) {
  int64_t rows = 0;
  for (const auto& b : batches) rows += b.rows();
  if (rows == 0) throw config_error("fit_stitch: no training rows");
  const Mat& first = model_a ? batches.front().x_a : batches.front().x_b;
  EMat out(rows, first.cols);
  int64_t w = 0;
  for (const auto& b : batches) {
    const Mat& m = model_a ? b.x_a : b.x_b;
    for (int64_t r = 0; r < m.rows; ++r) {
      for (int64_t c = 0; c < m.cols; ++c) out(w, c) = m.at(r, c);
      ++w;
    }
  }
  return out;
}

// Ridge least squares of Y ~ [X 1]; ridge scales with trace(X'X)/d and does
// not penalize the intercept. Returns (W: d_y x d_x, b: d_y).
std::pair<EMat, EVec> ridge_fit(const EMat& X, const EMat& Y, double ridge) {
  const int64_t n = X.rows();
  const int64_t dx = X.cols();
  EMat Xa(n, dx + 1);
  Xa.leftCols(dx) = X;
  Xa.col(dx).setOnes();
  EMat G = Xa.transpose() * Xa;
  const double tr = G.topLeftCorner(dx, dx).trace();
  if (ridge > 0.0) {
    const double lam = ridge * tr / static_cast<double>(dx);
    for (int64_t i = 0; i < dx; ++i) G(i, i) += lam;
  } else {
    Eigen::FullPivLU<EMat> lu(G);
    if (lu.rank() < dx + 1) {
      throw numeric_error("fit_stitch: singular system (rank-deficient data with ridge = 0)");
    }
  }
  EMat C = Xa.transpose() * Y;
  EMat Wt = G.ldlt().solve(C);  // (dx+1) x dy
  EMat W = Wt.topRows(dx).transpose();
  EVec b = Wt.row(dx).transpose();
  return {W, b};
}

Mat to_mat(const EMat& e) {
  Mat m(e.rows(), e.cols());
  for (int64_t r = 0; r < e.rows(); ++r)
    for (int64_t c = 0; c < e.cols(); ++c) m.at(r, c) = e(r, c);
  return m;
}

struct AdamBuf {
  EMat m, v;
  explicit AdamBuf(int64_t r, int64_t c) : m(EMat::Zero(r, c)), v(EMat::Zero(r, c)) {}
  void step(EMat& theta, const EMat& g, double lr, int64_t t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1 - std::pow(b2, static_cast<double>(t));
    theta -= lr * (m / c1).cwiseQuotient(((v / c2).cwiseSqrt().array() + eps).matrix());
  }
};

// Joint refinement of both directions with the round-trip penalty, started
// from the closed-form solutions.
void refine_with_inversion(const EMat& A, const EMat& B, double inv_w, EMat& W, EVec& b, EMat& Wi,
                           EVec& bi) {
  const double n = static_cast<double>(A.rows());
  AdamBuf mW(W.rows(), W.cols()), mb(b.size(), 1), mWi(Wi.rows(), Wi.cols()), mbi(bi.size(), 1);
  constexpr int kIters = 400;
  constexpr double kLr = 2e-3;
  for (int it = 1; it <= kIters; ++it) {
    const EMat P = A * W.transpose() + EVec::Ones(A.rows()) * b.transpose();
    const EMat Q = B * Wi.transpose() + EVec::Ones(B.rows()) * bi.transpose();
    const EMat R1 = P - B;
    const EMat R2 = Q - A;
    const EMat Z1 = P * Wi.transpose() + EVec::Ones(P.rows()) * bi.transpose();
    const EMat Z2 = Q * W.transpose() + EVec::Ones(Q.rows()) * b.transpose();
    const EMat R3 = Z1 - A;
    const EMat R4 = Z2 - B;

    EMat gW = (2.0 / n) * R1.transpose() * A;
    EVec gb = (2.0 / n) * R1.colwise().sum().transpose();
    EMat gWi = (2.0 / n) * R2.transpose() * B;
    EVec gbi = (2.0 / n) * R2.colwise().sum().transpose();

    gWi += (2.0 * inv_w / n) * R3.transpose() * P;
    gbi += (2.0 * inv_w / n) * R3.colwise().sum().transpose();
    const EMat dP = (2.0 * inv_w / n) * R3 * Wi;
    gW += dP.transpose() * A;
    gb += dP.colwise().sum().transpose();

    gW += (2.0 * inv_w / n) * R4.transpose() * Q;
    gb += (2.0 * inv_w / n) * R4.colwise().sum().transpose();
    const EMat dQ = (2.0 * inv_w / n) * R4 * W;
    gWi += dQ.transpose() * B;
    gbi += dQ.colwise().sum().transpose();

    mW.step(W, gW, kLr, it);
    EMat bm = b;
    mb.step(bm, gb, kLr, it);
    b = bm;
    mWi.step(Wi, gWi, kLr, it);
    EMat bim = bi;
    mbi.step(bim, gbi, kLr, it);
    bi = bim;
  }
}

}  // namespace

std::vector<double> StitchMap::apply(const double* x_a) const {
  std::vector<double> out(w.rows, 0.0);
  for (int64_t i = 0; i < w.rows; ++i) out[i] = dot(w.row(i), x_a, w.cols) + b[i];
  return out;
}

std::vector<double> StitchMap::apply_inverse(const double* x_b) const {
  if (!has_inverse) throw config_error("StitchMap: inverse map not fitted");
  std::vector<double> out(w_inv.rows, 0.0);
  for (int64_t i = 0; i < w_inv.rows; ++i) out[i] = dot(w_inv.row(i), x_b, w_inv.cols) + b_inv[i];
  return out;
}

std::vector<double> StitchMap::map_direction(const double* v_a) const {
  std::vector<double> out(w.rows, 0.0);
  for (int64_t i = 0; i < w.rows; ++i) out[i] = dot(w.row(i), v_a, w.cols);
  return out;
}

std::vector<double> StitchMap::map_direction_inverse(const double* v_b) const {
  if (!has_inverse) throw config_error("StitchMap: inverse map not fitted");
  std::vector<double> out(w_inv.rows, 0.0);
  for (int64_t i = 0; i < w_inv.rows; ++i) out[i] = dot(w_inv.row(i), v_b, w_inv.cols);
  return out;
}

double stitch_heldout_mse(const Mat& w, const std::vector<double>& b, const Mat& x_from,
                          const Mat& x_to) {
  if (x_from.rows != x_to.rows) throw shape_error("stitch_heldout_mse: row mismatch");
  double total = 0.0;
  for (int64_t r = 0; r < x_from.rows; ++r) {
    const double* xf = x_from.row(r);
    const double* xt = x_to.row(r);
    for (int64_t i = 0; i < w.rows; ++i) {
      const double d = dot(w.row(i), xf, w.cols) + b[i] - xt[i];
      total += d * d;
    }
  }
  return total / static_cast<double>(x_from.rows);
}

StitchMap fit_stitch(const std::vector<ActivationPairBatch>& train,
                     const ActivationPairBatch& heldout, double ridge, double inversion_weight,
                     bool fit_inverse) {
  if (ridge < 0.0) throw config_error("fit_stitch: ridge must be >= 0");
  if (inversion_weight < 0.0) throw config_error("fit_stitch: inversion_weight must be >= 0");
  const EMat A = concat_to_eigen(train, true);
  const EMat B = concat_to_eigen(train, false);
  if (A.rows() < A.cols() + 1)
    throw config_error("fit_stitch: need at least d_A + 1 training rows");

  StitchMap map;
  map.inversion_weight = inversion_weight;
  auto [W, b] = ridge_fit(A, B, ridge);
  EMat Wi;
  EVec bi;
  const bool need_inverse = fit_inverse || inversion_weight > 0.0;
  if (need_inverse) {
    auto [W2, b2] = ridge_fit(B, A, ridge);
    Wi = W2;
    bi = b2;
  }
  if (inversion_weight > 0.0) {
    refine_with_inversion(A, B, inversion_weight, W, b, Wi, bi);
  }

  map.w = to_mat(W);
  map.b.assign(b.data(), b.data() + b.size());
  if (need_inverse) {
    map.has_inverse = true;
    map.w_inv = to_mat(Wi);
    map.b_inv.assign(bi.data(), bi.data() + bi.size());
  }
  map.fit_mse = stitch_heldout_mse(map.w, map.b, heldout.x_a, heldout.x_b);
  if (map.has_inverse) {
    map.fit_mse_inverse = stitch_heldout_mse(map.w_inv, map.b_inv, heldout.x_b, heldout.x_a);
  }
  return map;
}

std::vector<double> transfer_vector(const CrosscoderModel& model, const std::vector<double>& v_a,
                                    int64_t n, const std::vector<int32_t>& dead) {
  if (static_cast<int64_t>(v_a.size()) != model.d_a)
    throw shape_error("transfer_vector: v_a has wrong dimension");
  if (n < 1) throw config_error("transfer_vector: n must be >= 1");
  const double vnorm = l2_norm(v_a.data(), model.d_a);
  if (vnorm == 0.0) throw numeric_error("transfer_vector: zero steering vector");

  std::vector<uint8_t> is_dead(model.dict_size, 0);
  for (int32_t j : dead) is_dead[j] = 1;

  // Search restricted to the shared partition, live features only.
  std::vector<std::pair<double, int64_t>> scored;
  for (int64_t j = model.layout.shared.begin; j < model.layout.shared.end; ++j) {
    if (is_dead[j]) continue;
    const double dn = l2_norm(model.w_dec_a.row(j), model.d_a);
    if (dn == 0.0) continue;
    const double c = dot(v_a.data(), model.w_dec_a.row(j), model.d_a) / (vnorm * dn);
    scored.emplace_back(c, j);
  }
  if (scored.empty()) throw numeric_error("transfer_vector: no live shared features");
  const int64_t take = std::min<int64_t>(n, static_cast<int64_t>(scored.size()));
  std::nth_element(scored.begin(), scored.begin() + (take - 1), scored.end(),
                   [](const auto& x, const auto& y) {
                     if (x.first != y.first) return x.first > y.first;
                     return x.second < y.second;
                   });
  scored.resize(take);

  if (std::all_of(scored.begin(), scored.end(), [](const auto& s) { return s.first <= 0.0; }))
    throw numeric_error("transfer_vector: degenerate transfer (no positively aligned features)");

  double wsum = 0.0;
  std::vector<double> v_b(model.d_b, 0.0);
  for (const auto& [c, j] : scored) {
    wsum += c;
    const double* row = model.w_dec_b.row(j);
    for (int64_t i = 0; i < model.d_b; ++i) v_b[i] += c * row[i];
  }
  if (wsum <= 0.0) throw numeric_error("transfer_vector: degenerate transfer (non-positive weight sum)");
  for (double& x : v_b) x /= wsum;
  const double bnorm = l2_norm(v_b.data(), model.d_b);
  if (bnorm == 0.0) throw numeric_error("transfer_vector: degenerate transfer (zero output)");
  const double s = vnorm / bnorm;
  for (double& x : v_b) x *= s;
  return v_b;
}

namespace {

double best_cosine_against_bank(const std::vector<double>& dir, const ConceptBank& bank,
                                bool target_is_b) {
  const double dn = l2_norm(dir.data(), static_cast<int64_t>(dir.size()));
  if (dn == 0.0) return 0.0;
  double best = -2.0;
  for (int64_t i = 0; i < bank.cfg.n_concepts; ++i) {
    const bool observable = target_is_b ? bank.observable_b(i) : bank.observable_a(i);
    if (!observable) continue;
    const Mat& frame = target_is_b ? bank.concepts_b : bank.concepts;
    const double cn = l2_norm(frame.row(i), frame.cols);
    if (cn == 0.0) continue;
    best = std::max(best, dot(dir.data(), frame.row(i), frame.cols) / (dn * cn));
  }
  return best;
}

}  // namespace

double exclusivity_proxy(const CrosscoderModel& model, const StitchMap& stitch, int64_t feature,
                         const ConceptBank& bank) {
  const double r = relative_decoder_norm(model, feature);  // throws if dead
  const bool b_side = r < 0.5;
  std::vector<double> dir;
  if (b_side) {
    const double* db = model.w_dec_b.row(feature);
    dir = stitch.map_direction_inverse(db);
  } else {
    const double* da = model.w_dec_a.row(feature);
    dir = stitch.map_direction(da);
  }
  const double cos_star = best_cosine_against_bank(dir, bank, /*target_is_b=*/!b_side);
  const double s = 1.0 + 4.0 * std::max(0.0, cos_star);
  return 6.0 - s;
}

std::vector<ExclusivityRecord> exclusivity_proxy_all(const CrosscoderModel& model,
                                                     const StitchMap& stitch,
                                                     const ConceptBank& bank,
                                                     const std::vector<FeatureClass>& classes) {
  std::vector<ExclusivityRecord> out;
  for (int64_t j = 0; j < model.dict_size; ++j) {
    if (classes[j] == FeatureClass::Dead) continue;
    double score;
    try {
      score = exclusivity_proxy(model, stitch, j, bank);
    } catch (const undefined_feature_error&) {
      continue;
    }
    out.push_back({static_cast<int32_t>(j), score, classes[j]});
  }
  return out;
}

}  // namespace crossdiff
