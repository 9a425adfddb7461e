#include "crossdiff/kernels.hpp"

#include <algorithm>

namespace crossdiff {

double median(std::vector<double> values) {
  if (values.empty()) throw numeric_error("median of empty range");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

SparseActsByCol group_by_col(const SparseActs& a) {
  SparseActsByCol out;
  out.col_ptr.assign(static_cast<size_t>(a.cols) + 1, 0);
  const int64_t nnz = a.nnz();
  for (int64_t t = 0; t < nnz; ++t) out.col_ptr[a.col[t] + 1]++;
  for (int64_t c = 0; c < a.cols; ++c) out.col_ptr[c + 1] += out.col_ptr[c];
  out.row.resize(nnz);
  out.val.resize(nnz);
  std::vector<int64_t> cursor(out.col_ptr.begin(), out.col_ptr.end() - 1);
  // CSR iteration is row-ascending, so each column bucket ends up
  // row-ascending as well.
  for (int64_t r = 0; r < a.rows; ++r) {
    for (int64_t t = a.row_ptr[r]; t < a.row_ptr[r + 1]; ++t) {
      const int32_t c = a.col[t];
      const int64_t dst = cursor[c]++;
      out.row[dst] = static_cast<int32_t>(r);
      out.val[dst] = a.val[t];
    }
  }
  return out;
}

namespace kern {

void matmul(const Mat& X, const Mat& W, Mat& out) {
  if (X.cols != W.rows) throw shape_error("matmul: inner dimensions differ");
  out = Mat(X.rows, W.cols);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < X.rows; ++r) {
    const double* x = X.row(r);
    double* o = out.row(r);
    for (int64_t d = 0; d < X.cols; ++d) {
      const double c = x[d];
      const double* w = W.row(d);
      for (int64_t j = 0; j < W.cols; ++j) o[j] += c * w[j];
    }
  }
}

void matmul_nt(const Mat& X, const Mat& Y, Mat& out) {
  if (X.cols != Y.cols) throw shape_error("matmul_nt: inner dimensions differ");
  out = Mat(X.rows, Y.rows);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < X.rows; ++r) {
    const double* x = X.row(r);
    double* o = out.row(r);
    for (int64_t j = 0; j < Y.rows; ++j) o[j] = dot(x, Y.row(j), X.cols);
  }
}

void sparse_decode(const SparseActs& acts, const Mat& Wd, const std::vector<double>& bias,
                   const uint8_t* visible, Mat& recon) {
  const int64_t d = Wd.cols;
  recon = Mat(acts.rows, d);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < acts.rows; ++r) {
    double* o = recon.row(r);
    if (!bias.empty()) {
      for (int64_t i = 0; i < d; ++i) o[i] = bias[i];
    }
    for (int64_t t = acts.row_ptr[r]; t < acts.row_ptr[r + 1]; ++t) {
      const int32_t j = acts.col[t];
      if (visible && !visible[j]) continue;
      const double v = acts.val[t];
      const double* w = Wd.row(j);
      for (int64_t i = 0; i < d; ++i) o[i] += v * w[i];
    }
  }
}

void decoder_grad(const SparseActs& acts, const SparseActsByCol& by_col, const Mat& G,
                  const uint8_t* visible, Mat& gWd) {
  const int64_t d = G.cols;
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < acts.cols; ++j) {
    if (visible && !visible[j]) continue;
    double* g = gWd.row(j);
    for (int64_t t = by_col.col_ptr[j]; t < by_col.col_ptr[j + 1]; ++t) {
      const double v = by_col.val[t];
      const double* gr = G.row(by_col.row[t]);
      for (int64_t i = 0; i < d; ++i) g[i] += v * gr[i];
    }
  }
}

void encoder_grad(const Mat& X, const SparseActs& g, const SparseActsByCol& by_col,
                  const std::vector<double>& coef, Mat& gWe) {
  const int64_t d = X.cols;
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < g.cols; ++j) {
    const double c = coef[j];
    if (c == 0.0) continue;
    double* out = gWe.row(j);
    for (int64_t t = by_col.col_ptr[j]; t < by_col.col_ptr[j + 1]; ++t) {
      const double v = c * by_col.val[t];
      const double* x = X.row(by_col.row[t]);
      for (int64_t i = 0; i < d; ++i) out[i] += v * x[i];
    }
  }
}

void input_grad(const SparseActs& g, const Mat& We, const std::vector<double>& coef, Mat& g_in) {
  const int64_t d = We.cols;
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < g.rows; ++r) {
    double* o = g_in.row(r);
    for (int64_t t = g.row_ptr[r]; t < g.row_ptr[r + 1]; ++t) {
      const double c = coef[g.col[t]];
      if (c == 0.0) continue;
      const double v = c * g.val[t];
      const double* w = We.row(g.col[t]);
      for (int64_t i = 0; i < d; ++i) o[i] += v * w[i];
    }
  }
}

void adam_update(std::vector<double>& theta, std::vector<double>& m, std::vector<double>& v,
                 const std::vector<double>& g, double lr, double beta1, double beta2, double eps,
                 int64_t t) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  const int64_t n = static_cast<int64_t>(theta.size());
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

void row_norms(const Mat& X, std::vector<double>& out) {
  out.resize(X.rows);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < X.rows; ++r) out[r] = l2_norm(X.row(r), X.cols);
}

}  // namespace kern
}  // namespace crossdiff
