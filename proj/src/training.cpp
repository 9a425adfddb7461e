#include "crossdiff/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crossdiff/errors.hpp"

namespace crossdiff {

void TrainConfig::validate() const {
  if (lr <= 0.0) throw config_error("TrainConfig.lr must be > 0");
  if (steps < 1) throw config_error("TrainConfig.steps must be >= 1");
  if (warmup_steps < 0) throw config_error("TrainConfig.warmup_steps must be >= 0");
  if (batch < 1) throw config_error("TrainConfig.batch must be >= 1");
  if (k_final < 1) throw config_error("TrainConfig.k_final must be >= 1");
  if (k_initial < k_final) throw config_error("TrainConfig.k_initial must be >= k_final");
  if (anneal_steps < 0 || anneal_steps > steps)
    throw config_error("TrainConfig.anneal_steps must be in [0, steps]");
  if (alpha_aux < 0.0) throw config_error("TrainConfig.alpha_aux must be >= 0");
  if (k_aux < 1) throw config_error("TrainConfig.k_aux must be >= 1");
  if (dead_window_tokens < 1) throw config_error("TrainConfig.dead_window_tokens must be >= 1");
  if (outlier_factor <= 1.0) throw config_error("TrainConfig.outlier_factor must be > 1");
  if (adam_beta1 <= 0.0 || adam_beta1 >= 1.0) throw config_error("TrainConfig.adam_beta1 out of (0,1)");
  if (adam_beta2 <= 0.0 || adam_beta2 >= 1.0) throw config_error("TrainConfig.adam_beta2 out of (0,1)");
  if (adam_eps <= 0.0) throw config_error("TrainConfig.adam_eps must be > 0");
  if (calibration_batches < 1) throw config_error("TrainConfig.calibration_batches must be >= 1");
  if (checkpoint_every < 0) throw config_error("TrainConfig.checkpoint_every must be >= 0");
  if (eval_every < 0) throw config_error("TrainConfig.eval_every must be >= 0");
}

ParamTensors ParamTensors::zeros_like(const CrosscoderModel& m) {
  ParamTensors p;
  p.w_enc_a = Mat(m.dict_size, m.d_a);
  p.w_enc_b = Mat(m.dict_size, m.d_b);
  p.w_dec_a = Mat(m.dict_size, m.d_a);
  p.w_dec_b = Mat(m.dict_size, m.d_b);
  p.b_enc.assign(m.dict_size, 0.0);
  p.b_dec_a.assign(m.d_a, 0.0);
  p.b_dec_b.assign(m.d_b, 0.0);
  return p;
}

TrainState TrainState::init(const CrosscoderModel& m) {
  TrainState s;
  s.adam_m = ParamTensors::zeros_like(m);
  s.adam_v = ParamTensors::zeros_like(m);
  s.tokens_since_fire.assign(m.dict_size, 0);
  return s;
}

void TrainState::push_recent(const LossParts& lp) {
  constexpr size_t kRing = 100;
  if (recent.size() < kRing) {
    recent.push_back(lp);
  } else {
    recent[recent_next] = lp;
  }
  recent_next = (recent_next + 1) % kRing;
}

std::pair<double, double> compute_normalization(const ActivationPairBatch& sample, int64_t d_a,
                                                int64_t d_b) {
  if (sample.rows() == 0) throw config_error("compute_normalization: empty sample");
  const double target = std::sqrt(static_cast<double>(d_a + d_b) / 2.0);
  std::vector<double> na, nb;
  kern::row_norms(sample.x_a, na);
  kern::row_norms(sample.x_b, nb);
  const double med_a = median(na);
  const double med_b = median(nb);
  if (med_a <= 0.0 || med_b <= 0.0)
    throw numeric_error("compute_normalization: zero median row norm (all-zero sample)");
  return {target / med_a, target / med_b};
}

std::vector<uint8_t> mask_outliers(const ActivationPairBatch& batch, double factor) {
  if (!(factor > 1.0)) throw config_error("mask_outliers: factor must be > 1");
  std::vector<double> na, nb;
  kern::row_norms(batch.x_a, na);
  kern::row_norms(batch.x_b, nb);
  const double med_a = median(na);
  const double med_b = median(nb);
  std::vector<uint8_t> keep(na.size(), 1);
  for (size_t r = 0; r < na.size(); ++r) {
    if (na[r] > factor * med_a || nb[r] > factor * med_b) keep[r] = 0;
  }
  return keep;
}

ActivationPairBatch filter_rows(const ActivationPairBatch& batch, const std::vector<uint8_t>& keep) {
  const int64_t kept = std::count(keep.begin(), keep.end(), uint8_t{1});
  ActivationPairBatch out;
  out.x_a = Mat(kept, batch.x_a.cols);
  out.x_b = Mat(kept, batch.x_b.cols);
  if (batch.active_sets) out.active_sets.emplace();
  int64_t w = 0;
  for (int64_t r = 0; r < batch.rows(); ++r) {
    if (!keep[r]) continue;
    std::copy(batch.x_a.row(r), batch.x_a.row(r) + batch.x_a.cols, out.x_a.row(w));
    std::copy(batch.x_b.row(r), batch.x_b.row(r) + batch.x_b.cols, out.x_b.row(w));
    if (batch.active_sets) out.active_sets->push_back((*batch.active_sets)[r]);
    ++w;
  }
  return out;
}

double warmup_lr(double lr, int64_t step, int64_t warmup_steps) {
  if (warmup_steps <= 0 || step >= warmup_steps) return lr;
  return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

int64_t anneal_k(int64_t k_initial, int64_t k_final, int64_t step, int64_t anneal_steps) {
  if (anneal_steps <= 0 || step >= anneal_steps) return k_final;
  const double frac = static_cast<double>(step) / static_cast<double>(anneal_steps);
  return std::llround(static_cast<double>(k_initial) +
                      (static_cast<double>(k_final) - static_cast<double>(k_initial)) * frac);
}

std::vector<int32_t> dead_features(const TrainState& state, int64_t dead_window_tokens) {
  std::vector<int32_t> dead;
  for (size_t j = 0; j < state.tokens_since_fire.size(); ++j) {
    if (state.tokens_since_fire[j] >= dead_window_tokens) dead.push_back(static_cast<int32_t>(j));
  }
  return dead;
}

namespace {

SparseActs gather_positions(const CrosscoderModel& model, const Mat& pre, const SparseActs& pos) {
  SparseActs out = pos;
  (void)model;
  for (int64_t r = 0; r < pos.rows; ++r) {
    for (int64_t t = pos.row_ptr[r]; t < pos.row_ptr[r + 1]; ++t) {
      out.val[t] = pre.at(r, pos.col[t]);
    }
  }
  return out;
}

double aux_pre_value(const CrosscoderModel& model, const Mat& ea, const Mat& eb, int64_t r,
                     int64_t j) {
  double v = 0.0;
  if (model.enc_coef_a[j] != 0.0)
    v += model.enc_coef_a[j] * dot(ea.row(r), model.w_enc_a.row(j), model.d_a);
  if (model.enc_coef_b[j] != 0.0)
    v += model.enc_coef_b[j] * dot(eb.row(r), model.w_enc_b.row(j), model.d_b);
  return v;
}

// Per-row top-k_aux positive dead-feature pre-activations, no bias; mirrors
// the main encoder routing applied to the residual.
SparseActs select_aux(const CrosscoderModel& model, const Mat& ea, const Mat& eb,
                      const std::vector<int32_t>& dead, int64_t k_aux) {
  const int64_t rows = ea.rows;
  const int64_t budget = std::min<int64_t>(k_aux, static_cast<int64_t>(dead.size()));
  std::vector<std::vector<std::pair<int32_t, double>>> per_row(rows);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    std::vector<std::pair<int32_t, double>> cand;
    for (int32_t j : dead) {
      const double v = aux_pre_value(model, ea, eb, r, j);
      if (v > 0.0) cand.emplace_back(j, v);
    }
    if (static_cast<int64_t>(cand.size()) > budget) {
      std::nth_element(cand.begin(), cand.begin() + (budget - 1), cand.end(),
                       [](const auto& x, const auto& y) {
                         if (x.second != y.second) return x.second > y.second;
                         return x.first < y.first;
                       });
      cand.resize(budget);
    }
    std::sort(cand.begin(), cand.end(),
              [](const auto& x, const auto& y) { return x.first < y.first; });
    per_row[r] = std::move(cand);
  }
  SparseActs z;
  z.init_empty(rows, model.dict_size);
  for (int64_t r = 0; r < rows; ++r) {
    for (const auto& [j, v] : per_row[r]) {
      z.col.push_back(j);
      z.val.push_back(v);
    }
    z.row_ptr[r + 1] = z.nnz();
  }
  return z;
}

SparseActs gather_aux(const CrosscoderModel& model, const Mat& ea, const Mat& eb,
                      const SparseActs& pos) {
  SparseActs out = pos;
  for (int64_t r = 0; r < pos.rows; ++r) {
    for (int64_t t = pos.row_ptr[r]; t < pos.row_ptr[r + 1]; ++t) {
      out.val[t] = aux_pre_value(model, ea, eb, r, pos.col[t]);
    }
  }
  return out;
}

double sq_sum(const Mat& m) {
  double s = 0.0;
  for (double v : m.data) s += v * v;
  return s;
}

// g_sparse(r,j) = sum_d Ga[r,d] * Wda[j,d] (if visible in A) + likewise in B.
void recon_grad_to_acts(const CrosscoderModel& model, const SparseActs& entries, const Mat& ga,
                        const Mat& gb, SparseActs& out) {
  out = entries;
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < entries.rows; ++r) {
    for (int64_t t = entries.row_ptr[r]; t < entries.row_ptr[r + 1]; ++t) {
      const int32_t j = entries.col[t];
      double v = 0.0;
      if (model.dec_vis_a[j]) v += dot(ga.row(r), model.w_dec_a.row(j), model.d_a);
      if (model.dec_vis_b[j]) v += dot(gb.row(r), model.w_dec_b.row(j), model.d_b);
      out.val[t] = v;
    }
  }
}

void scaled_copy(const Mat& src, double s, Mat& dst) {
  dst = Mat(src.rows, src.cols);
  const int64_t n = static_cast<int64_t>(src.data.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) dst.data[i] = s * src.data[i];
}

void column_sums_sparse(const SparseActs& g, std::vector<double>& out) {
  for (int64_t t = 0; t < g.nnz(); ++t) out[g.col[t]] += g.val[t];
}

void column_sums_dense(const Mat& g, std::vector<double>& out) {
  for (int64_t r = 0; r < g.rows; ++r) {
    const double* row = g.row(r);
    for (int64_t c = 0; c < g.cols; ++c) out[c] += row[c];
  }
}

StepResult compute_step(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b,
                        const std::vector<int32_t>& dead, double alpha_aux, int64_t k_aux,
                        int64_t k_effective, const FrozenMasks* frozen, bool want_grads) {
  StepResult out;

  Mat pre = encode(model, x_a, x_b);
  out.acts = frozen ? gather_positions(model, pre, frozen->main)
                    : batch_topk(pre, k_effective, model.dsf_designated);

  Mat ra, rb;
  decode(model, out.acts, ra, rb);

  Mat ea(x_a.rows, x_a.cols), eb(x_b.rows, x_b.cols);
  for (size_t i = 0; i < ea.data.size(); ++i) ea.data[i] = x_a.data[i] - ra.data[i];
  for (size_t i = 0; i < eb.data.size(); ++i) eb.data[i] = x_b.data[i] - rb.data[i];

  out.loss.recon_a = sq_sum(ea);
  out.loss.recon_b = sq_sum(eb);
  if (!std::isfinite(out.loss.recon_a) || !std::isfinite(out.loss.recon_b)) {
    throw numeric_error("non-finite reconstruction loss");
  }

  out.fired.assign(model.dict_size, 0);
  for (int64_t t = 0; t < out.acts.nnz(); ++t) {
    if (out.acts.val[t] != 0.0) out.fired[out.acts.col[t]] = 1;
  }

  // Auxiliary path.
  const bool aux_wanted =
      alpha_aux > 0.0 && (frozen ? frozen->aux.nnz() > 0 : !dead.empty());
  SparseActs z;
  Mat ehat_a, ehat_b, qa, qb;
  bool aux_active = false;
  out.aux_acts.init_empty(x_a.rows, model.dict_size);
  if (aux_wanted) {
    z = frozen ? gather_aux(model, ea, eb, frozen->aux) : select_aux(model, ea, eb, dead, k_aux);
    out.aux_acts = z;
    kern::sparse_decode(z, model.w_dec_a, {}, model.dec_vis_a.data(), ehat_a);
    kern::sparse_decode(z, model.w_dec_b, {}, model.dec_vis_b.data(), ehat_b);
    qa = Mat(ea.rows, ea.cols);
    qb = Mat(eb.rows, eb.cols);
    for (size_t i = 0; i < qa.data.size(); ++i) qa.data[i] = ea.data[i] - ehat_a.data[i];
    for (size_t i = 0; i < qb.data.size(); ++i) qb.data[i] = eb.data[i] - ehat_b.data[i];
    const double laux = sq_sum(qa) + sq_sum(qb);
    if (std::isfinite(laux)) {
      out.loss.aux = laux;
      aux_active = true;
    } else {
      out.loss.aux = 0.0;  // non-finite aux loss is zeroed for the step
    }
  }
  out.loss.total = out.loss.recon_a + out.loss.recon_b + alpha_aux * out.loss.aux;

  if (!want_grads) return out;

  out.grads = ParamTensors::zeros_like(model);

  // d(total)/d(e): 2e from the reconstruction terms, plus the direct
  // auxiliary term; the aux encoder path is added below.
  Mat g_ea(ea.rows, ea.cols), g_eb(eb.rows, eb.cols);
  for (size_t i = 0; i < g_ea.data.size(); ++i) {
    g_ea.data[i] = 2.0 * ea.data[i] + (aux_active ? 2.0 * alpha_aux * qa.data[i] : 0.0);
  }
  for (size_t i = 0; i < g_eb.data.size(); ++i) {
    g_eb.data[i] = 2.0 * eb.data[i] + (aux_active ? 2.0 * alpha_aux * qb.data[i] : 0.0);
  }

  if (aux_active) {
    // ghat = d(total)/d(ehat) = -2 * alpha * q
    Mat ghat_a, ghat_b;
    scaled_copy(qa, -2.0 * alpha_aux, ghat_a);
    scaled_copy(qb, -2.0 * alpha_aux, ghat_b);
    const SparseActsByCol z_bycol = group_by_col(z);
    kern::decoder_grad(z, z_bycol, ghat_a, model.dec_vis_a.data(), out.grads.w_dec_a);
    kern::decoder_grad(z, z_bycol, ghat_b, model.dec_vis_b.data(), out.grads.w_dec_b);

    SparseActs g_z;
    recon_grad_to_acts(model, z, ghat_a, ghat_b, g_z);
    const SparseActsByCol gz_bycol = group_by_col(g_z);
    kern::encoder_grad(ea, g_z, gz_bycol, model.enc_coef_a, out.grads.w_enc_a);
    kern::encoder_grad(eb, g_z, gz_bycol, model.enc_coef_b, out.grads.w_enc_b);
    kern::input_grad(g_z, model.w_enc_a, model.enc_coef_a, g_ea);
    kern::input_grad(g_z, model.w_enc_b, model.enc_coef_b, g_eb);
  }

  // e = x - recon, so d/d(recon) = -d/d(e).
  Mat g_ra, g_rb;
  scaled_copy(g_ea, -1.0, g_ra);
  scaled_copy(g_eb, -1.0, g_rb);

  column_sums_dense(g_ra, out.grads.b_dec_a);
  column_sums_dense(g_rb, out.grads.b_dec_b);

  const SparseActsByCol acts_bycol = group_by_col(out.acts);
  kern::decoder_grad(out.acts, acts_bycol, g_ra, model.dec_vis_a.data(), out.grads.w_dec_a);
  kern::decoder_grad(out.acts, acts_bycol, g_rb, model.dec_vis_b.data(), out.grads.w_dec_b);

  SparseActs g_pre;
  recon_grad_to_acts(model, out.acts, g_ra, g_rb, g_pre);
  column_sums_sparse(g_pre, out.grads.b_enc);
  const SparseActsByCol gpre_bycol = group_by_col(g_pre);
  kern::encoder_grad(x_a, g_pre, gpre_bycol, model.enc_coef_a, out.grads.w_enc_a);
  kern::encoder_grad(x_b, g_pre, gpre_bycol, model.enc_coef_b, out.grads.w_enc_b);

  return out;
}

}  // namespace

StepResult loss_and_grads(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b,
                          const std::vector<int32_t>& dead, double alpha_aux, int64_t k_aux,
                          int64_t k_effective, const FrozenMasks* frozen) {
  return compute_step(model, x_a, x_b, dead, alpha_aux, k_aux, k_effective, frozen, true);
}

LossParts loss_with_masks(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b,
                          const std::vector<int32_t>& dead, double alpha_aux, int64_t k_aux,
                          const FrozenMasks& frozen) {
  return compute_step(model, x_a, x_b, dead, alpha_aux, k_aux, /*k_effective=*/1, &frozen, false)
      .loss;
}

namespace {

void scale_mat(Mat& m, double s) {
  const int64_t n = static_cast<int64_t>(m.data.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) m.data[i] *= s;
}

double batch_variance(const Mat& x) {
  std::vector<double> mean(x.cols, 0.0);
  for (int64_t r = 0; r < x.rows; ++r) {
    const double* row = x.row(r);
    for (int64_t c = 0; c < x.cols; ++c) mean[c] += row[c];
  }
  for (double& v : mean) v /= static_cast<double>(x.rows);
  double s = 0.0;
  for (int64_t r = 0; r < x.rows; ++r) {
    const double* row = x.row(r);
    for (int64_t c = 0; c < x.cols; ++c) {
      const double d = row[c] - mean[c];
      s += d * d;
    }
  }
  return s;
}

void apply_tied_decoder_grads(const CrosscoderModel& model, ParamTensors& g) {
  if (model.arch != Arch::DSF) return;
  const IndexRange r = model.dsf_designated->range;
  for (int64_t j = r.begin; j < r.end; ++j) {
    double* ga = g.w_dec_a.row(j);
    double* gb = g.w_dec_b.row(j);
    for (int64_t i = 0; i < model.d_a; ++i) {
      const double s = ga[i] + gb[i];
      ga[i] = s;
      gb[i] = s;
    }
  }
}

}  // namespace

TrainResult train(CrosscoderModel& model, BatchSource& stream, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.k_initial > model.dict_size)
    throw config_error("TrainConfig.k_initial exceeds the dictionary size");

  TrainResult result;
  TrainState& state = result.state;
  state = TrainState::init(model);

  {
    // Calibration prefix: fix the normalization scales, then train on the
    // rest of the stream.
    ActivationPairBatch calib = stream.next();
    for (int64_t i = 1; i < cfg.calibration_batches; ++i) {
      ActivationPairBatch b = stream.next();
      const int64_t old_rows = calib.x_a.rows;
      Mat xa(old_rows + b.x_a.rows, calib.x_a.cols);
      Mat xb(old_rows + b.x_b.rows, calib.x_b.cols);
      std::copy(calib.x_a.data.begin(), calib.x_a.data.end(), xa.data.begin());
      std::copy(b.x_a.data.begin(), b.x_a.data.end(), xa.data.begin() + calib.x_a.data.size());
      std::copy(calib.x_b.data.begin(), calib.x_b.data.end(), xb.data.begin());
      std::copy(b.x_b.data.begin(), b.x_b.data.end(), xb.data.begin() + calib.x_b.data.size());
      calib.x_a = std::move(xa);
      calib.x_b = std::move(xb);
      calib.active_sets.reset();
    }
    auto [sa, sb] = compute_normalization(calib, model.d_a, model.d_b);
    state.norm_scale_a = sa;
    state.norm_scale_b = sb;
  }

  result.metrics.reserve(cfg.steps);
  if (hooks.on_eval && cfg.eval_every > 0) hooks.on_eval(0, model, state);

  for (int64_t step = 0; step < cfg.steps; ++step) {
    ActivationPairBatch batch = stream.next();
    scale_mat(batch.x_a, state.norm_scale_a);
    scale_mat(batch.x_b, state.norm_scale_b);

    const std::vector<uint8_t> keep = mask_outliers(batch, cfg.outlier_factor);
    const bool all_kept =
        std::all_of(keep.begin(), keep.end(), [](uint8_t k) { return k != 0; });
    const ActivationPairBatch& used = all_kept ? batch : (batch = filter_rows(batch, keep), batch);
    const int64_t rows_inc = used.rows();

    MetricsRecord rec;
    rec.step = step;
    rec.k = anneal_k(cfg.k_initial, cfg.k_final, step, cfg.anneal_steps);
    rec.lr = warmup_lr(cfg.lr, step, cfg.warmup_steps);

    const std::vector<int32_t> dead = dead_features(state, cfg.dead_window_tokens);
    rec.dead_frac = static_cast<double>(dead.size()) / static_cast<double>(model.dict_size);

    if (rows_inc > 0) {
      StepResult sr;
      try {
        sr = loss_and_grads(model, used.x_a, used.x_b, dead, cfg.alpha_aux, cfg.k_aux, rec.k);
      } catch (const numeric_error& e) {
        std::string diag = std::string(e.what()) + " (step " + std::to_string(step) +
                           ", rows " + std::to_string(rows_inc) + ", k " + std::to_string(rec.k);
        if (!state.recent.empty()) {
          const LossParts& last = state.recent[(state.recent_next + state.recent.size() - 1) %
                                               state.recent.size()];
          diag += ", last total loss " + std::to_string(last.total);
        }
        throw numeric_error(diag + ")");
      }

      apply_tied_decoder_grads(model, sr.grads);

      const int64_t t = state.step + 1;
      kern::adam_update(model.w_enc_a.data, state.adam_m.w_enc_a.data, state.adam_v.w_enc_a.data,
                        sr.grads.w_enc_a.data, rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, t);
      kern::adam_update(model.w_enc_b.data, state.adam_m.w_enc_b.data, state.adam_v.w_enc_b.data,
                        sr.grads.w_enc_b.data, rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, t);
      kern::adam_update(model.b_enc, state.adam_m.b_enc, state.adam_v.b_enc, sr.grads.b_enc,
                        rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, t);
      kern::adam_update(model.w_dec_a.data, state.adam_m.w_dec_a.data, state.adam_v.w_dec_a.data,
                        sr.grads.w_dec_a.data, rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, t);
      kern::adam_update(model.w_dec_b.data, state.adam_m.w_dec_b.data, state.adam_v.w_dec_b.data,
                        sr.grads.w_dec_b.data, rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, t);
      kern::adam_update(model.b_dec_a, state.adam_m.b_dec_a, state.adam_v.b_dec_a, sr.grads.b_dec_a,
                        rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, t);
      kern::adam_update(model.b_dec_b, state.adam_m.b_dec_b, state.adam_v.b_dec_b, sr.grads.b_dec_b,
                        rec.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, t);
      model.enforce_structural_zeros();

      for (int64_t j = 0; j < model.dict_size; ++j) {
        if (sr.fired[j]) {
          state.tokens_since_fire[j] = 0;
        } else {
          state.tokens_since_fire[j] += rows_inc;
        }
      }

      rec.loss_recon_a = sr.loss.recon_a / static_cast<double>(rows_inc);
      rec.loss_recon_b = sr.loss.recon_b / static_cast<double>(rows_inc);
      rec.loss_aux = sr.loss.aux / static_cast<double>(rows_inc);
      const double var_a = batch_variance(used.x_a);
      const double var_b = batch_variance(used.x_b);
      rec.fve_a = var_a > 0.0 ? 1.0 - sr.loss.recon_a / var_a : 0.0;
      rec.fve_b = var_b > 0.0 ? 1.0 - sr.loss.recon_b / var_b : 0.0;
      state.push_recent(sr.loss);
    }
    state.step = step + 1;
    result.metrics.push_back(rec);

    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      hooks.on_checkpoint(step + 1, model, state);
    }
    if (hooks.on_eval && cfg.eval_every > 0 &&
        ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
      hooks.on_eval(step + 1, model, state);
    }
  }
  return result;
}

}  // namespace crossdiff
