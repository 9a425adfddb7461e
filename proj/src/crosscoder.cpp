#include "crossdiff/crosscoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crossdiff/errors.hpp"
#include "crossdiff/rng.hpp"

namespace crossdiff {

const char* arch_name(Arch a) {
  switch (a) {
    case Arch::Standard: return "standard";
    case Arch::DFC: return "dfc";
    case Arch::DSF: return "dsf";
  }
  return "?";
}

Arch arch_from_name(const std::string& s) {
  if (s == "standard") return Arch::Standard;
  if (s == "dfc") return Arch::DFC;
  if (s == "dsf") return Arch::DSF;
  throw config_error("unknown architecture '" + s + "' (expected standard|dfc|dsf)");
}

PartitionLayout PartitionLayout::standard(int64_t M) {
  PartitionLayout l;
  l.a_exclusive = {0, 0};
  l.b_exclusive = {0, 0};
  l.shared = {0, M};
  l.dict_size = M;
  return l;
}

PartitionLayout PartitionLayout::dfc(int64_t M, int64_t n_a, int64_t n_b) {
  PartitionLayout l;
  l.a_exclusive = {0, n_a};
  l.b_exclusive = {n_a, n_a + n_b};
  l.shared = {n_a + n_b, M};
  l.dict_size = M;
  return l;
}

void PartitionLayout::validate(Arch arch) const {
  if (dict_size < 1) throw config_error("PartitionLayout.dict_size must be >= 1");
  if (a_exclusive.begin != 0 || a_exclusive.end != b_exclusive.begin ||
      b_exclusive.end != shared.begin || shared.end != dict_size ||
      a_exclusive.size() < 0 || b_exclusive.size() < 0 || shared.size() < 0) {
    throw config_error("PartitionLayout ranges must tile [0, M) as [A|B|shared]");
  }
  if (arch != Arch::DFC && (a_exclusive.size() != 0 || b_exclusive.size() != 0)) {
    throw config_error("PartitionLayout: exclusive ranges must be empty for " +
                       std::string(arch_name(arch)));
  }
  if (arch == Arch::DFC && shared.size() == 0 && a_exclusive.size() == 0 && b_exclusive.size() == 0) {
    throw config_error("PartitionLayout: empty layout");
  }
}

void CrosscoderModel::rebuild_routing() {
  const int64_t M = dict_size;
  enc_coef_a.assign(M, 0.5);
  enc_coef_b.assign(M, 0.5);
  dec_vis_a.assign(M, 1);
  dec_vis_b.assign(M, 1);
  if (arch == Arch::DFC) {
    for (int64_t j = layout.a_exclusive.begin; j < layout.a_exclusive.end; ++j) {
      enc_coef_a[j] = 1.0;
      enc_coef_b[j] = 0.0;
      dec_vis_b[j] = 0;
    }
    for (int64_t j = layout.b_exclusive.begin; j < layout.b_exclusive.end; ++j) {
      enc_coef_a[j] = 0.0;
      enc_coef_b[j] = 1.0;
      dec_vis_a[j] = 0;
    }
  }
}

void CrosscoderModel::enforce_structural_zeros() {
  if (arch != Arch::DFC) return;
  for (int64_t j = layout.a_exclusive.begin; j < layout.a_exclusive.end; ++j) {
    double* row = w_dec_b.row(j);
    std::fill(row, row + d_b, 0.0);
  }
  for (int64_t j = layout.b_exclusive.begin; j < layout.b_exclusive.end; ++j) {
    double* row = w_dec_a.row(j);
    std::fill(row, row + d_a, 0.0);
  }
}

CrosscoderModel init_model(Arch arch, int64_t d_a, int64_t d_b, int64_t M, int64_t k,
                           const PartitionLayout& layout, double init_decoder_norm, uint64_t seed,
                           std::optional<DsfDesignated> dsf) {
  layout.validate(arch);
  if (layout.dict_size != M) throw config_error("init_model: layout.dict_size != M");
  if (k < 1 || k > M) throw config_error("init_model: need 1 <= k <= M");
  if (d_a < 1 || d_b < 1) throw config_error("init_model: activation dims must be >= 1");
  if (arch == Arch::DSF) {
    if (!dsf) throw config_error("init_model: DSF requires a designated range");
    if (d_a != d_b) throw config_error("init_model: DSF decoder tying requires d_A == d_B");
    if (!(dsf->range.begin >= layout.shared.begin && dsf->range.end <= layout.shared.end &&
          dsf->range.size() > 0)) {
      throw config_error("init_model: DSF designated range must lie inside the shared range");
    }
    if (dsf->k_multiplier <= 0.0) throw config_error("init_model: DSF k_multiplier must be > 0");
  } else if (dsf) {
    throw config_error("init_model: designated range only valid for DSF");
  }

  CrosscoderModel m;
  m.arch = arch;
  m.d_a = d_a;
  m.d_b = d_b;
  m.dict_size = M;
  m.k = k;
  m.layout = layout;
  m.dsf_designated = dsf;
  m.w_dec_a = Mat(M, d_a);
  m.w_dec_b = Mat(M, d_b);
  m.w_enc_a = Mat(M, d_a);
  m.w_enc_b = Mat(M, d_b);
  m.b_enc.assign(M, 0.0);
  m.b_dec_a.assign(d_a, 0.0);
  m.b_dec_b.assign(d_b, 0.0);
  m.rebuild_routing();

  Rng rng(derive_seed(seed, SeedDomain::ModelInit));
  // Fixed draw order: per feature, the model-A row then the model-B row. DSF
  // designated rows discard the B draw and mirror the A row so the tied pair
  // starts bit-identical.
  for (int64_t j = 0; j < M; ++j) {
    double* da = m.w_dec_a.row(j);
    double* db = m.w_dec_b.row(j);
    for (int64_t i = 0; i < d_a; ++i) da[i] = rng.next_gaussian();
    for (int64_t i = 0; i < d_b; ++i) db[i] = rng.next_gaussian();
    if (arch == Arch::DSF && dsf->range.contains(j)) {
      std::copy(da, da + d_a, db);
    }
  }
  m.enforce_structural_zeros();
  for (int64_t j = 0; j < M; ++j) {
    for (Mat* w : {&m.w_dec_a, &m.w_dec_b}) {
      double* row = w->row(j);
      const double nrm = l2_norm(row, w->cols);
      if (nrm > 0.0) {
        const double s = init_decoder_norm / nrm;
        for (int64_t i = 0; i < w->cols; ++i) row[i] *= s;
      }
    }
  }
  // Encoder starts as the transpose of its decoder; in feature-major storage
  // that is a plain copy.
  m.w_enc_a = m.w_dec_a;
  m.w_enc_b = m.w_dec_b;
  return m;
}

Mat encode(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b) {
  if (x_a.rows != x_b.rows) throw shape_error("encode: batch sizes differ");
  if (x_a.cols != model.d_a) throw shape_error("encode: x_a has wrong width");
  if (x_b.cols != model.d_b) throw shape_error("encode: x_b has wrong width");
  Mat pa, pb;
  kern::matmul_nt(x_a, model.w_enc_a, pa);
  kern::matmul_nt(x_b, model.w_enc_b, pb);
  const int64_t M = model.dict_size;
  Mat pre(x_a.rows, M);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < pre.rows; ++r) {
    const double* a = pa.row(r);
    const double* b = pb.row(r);
    double* o = pre.row(r);
    for (int64_t j = 0; j < M; ++j) {
      o[j] = model.enc_coef_a[j] * a[j] + model.enc_coef_b[j] * b[j] + model.b_enc[j];
    }
  }
  return pre;
}

namespace {

struct Candidate {
  double val;
  int64_t flat;  // row * M + col, encodes the lexicographic tie-break
};

inline bool better(const Candidate& x, const Candidate& y) {
  if (x.val != y.val) return x.val > y.val;
  return x.flat < y.flat;
}

// Select the top `budget` candidates under the (value desc, position asc)
// total order and mark them in `selected`.
void select_pool(std::vector<Candidate>& cand, int64_t budget, std::vector<uint8_t>& selected) {
  if (budget <= 0 || cand.empty()) return;
  if (static_cast<int64_t>(cand.size()) > budget) {
    std::nth_element(cand.begin(), cand.begin() + (budget - 1), cand.end(), better);
    cand.resize(budget);
  }
  for (const Candidate& c : cand) selected[c.flat] = 1;
}

}  // namespace

SparseActs batch_topk(const Mat& pre_acts, int64_t k_effective,
                      const std::optional<DsfDesignated>& dsf) {
  if (k_effective < 1) throw config_error("batch_topk: k_effective must be >= 1");
  const int64_t rows = pre_acts.rows;
  const int64_t M = pre_acts.cols;
  const int64_t total_budget = rows * k_effective;

  std::vector<uint8_t> selected(static_cast<size_t>(rows * M), 0);
  if (dsf) {
    const int64_t des = dsf->range.size();
    int64_t budget_des = std::llround(static_cast<double>(total_budget) * dsf->k_multiplier *
                                      static_cast<double>(des) / static_cast<double>(M));
    budget_des = std::clamp<int64_t>(budget_des, 0, total_budget);
    const int64_t budget_rest = total_budget - budget_des;
    std::vector<Candidate> in_pool, out_pool;
    for (int64_t r = 0; r < rows; ++r) {
      const double* p = pre_acts.row(r);
      for (int64_t j = 0; j < M; ++j) {
        if (p[j] > 0.0) {
          Candidate c{p[j], r * M + j};
          (dsf->range.contains(j) ? in_pool : out_pool).push_back(c);
        }
      }
    }
    select_pool(in_pool, budget_des, selected);
    select_pool(out_pool, budget_rest, selected);
  } else {
    std::vector<Candidate> pool;
    pool.reserve(static_cast<size_t>(total_budget) * 2);
    for (int64_t r = 0; r < rows; ++r) {
      const double* p = pre_acts.row(r);
      for (int64_t j = 0; j < M; ++j) {
        if (p[j] > 0.0) pool.push_back({p[j], r * M + j});
      }
    }
    select_pool(pool, total_budget, selected);
  }

  SparseActs acts;
  acts.init_empty(rows, M);
  for (int64_t r = 0; r < rows; ++r) {
    const double* p = pre_acts.row(r);
    for (int64_t j = 0; j < M; ++j) {
      if (selected[r * M + j]) {
        acts.col.push_back(static_cast<int32_t>(j));
        acts.val.push_back(p[j]);
      }
    }
    acts.row_ptr[r + 1] = acts.nnz();
  }
  return acts;
}

std::vector<uint8_t> mask_from_acts(const SparseActs& acts) {
  std::vector<uint8_t> mask(static_cast<size_t>(acts.rows * acts.cols), 0);
  for (int64_t r = 0; r < acts.rows; ++r) {
    for (int64_t t = acts.row_ptr[r]; t < acts.row_ptr[r + 1]; ++t) {
      mask[r * acts.cols + acts.col[t]] = 1;
    }
  }
  return mask;
}

void decode(const CrosscoderModel& model, const SparseActs& acts, Mat& recon_a, Mat& recon_b) {
  if (acts.cols != model.dict_size) throw shape_error("decode: acts width != dict size");
  kern::sparse_decode(acts, model.w_dec_a, model.b_dec_a, model.dec_vis_a.data(), recon_a);
  kern::sparse_decode(acts, model.w_dec_b, model.b_dec_b, model.dec_vis_b.data(), recon_b);
}

ForwardTrace forward(const CrosscoderModel& model, const Mat& x_a, const Mat& x_b,
                     int64_t k_effective) {
  ForwardTrace t;
  t.pre_acts = encode(model, x_a, x_b);
  t.acts = batch_topk(t.pre_acts, k_effective, model.dsf_designated);
  t.topk_mask = mask_from_acts(t.acts);
  decode(model, t.acts, t.recon_a, t.recon_b);
  return t;
}

double relative_decoder_norm(const CrosscoderModel& model, int64_t feature) {
  if (feature < 0 || feature >= model.dict_size)
    throw shape_error("relative_decoder_norm: feature index out of range");
  const double na = l2_norm(model.w_dec_a.row(feature), model.d_a);
  const double nb = l2_norm(model.w_dec_b.row(feature), model.d_b);
  if (na == 0.0 && nb == 0.0)
    throw undefined_feature_error("feature " + std::to_string(feature) + " has zero decoders");
  return na / (na + nb);
}

}  // namespace crossdiff
