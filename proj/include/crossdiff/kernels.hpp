#pragma once

#include <cstdint>
#include <vector>

#include "crossdiff/mat.hpp"

namespace crossdiff {

// Batch-sparse activations in CSR form: entry t is (row_ptr bucket, col[t],
// val[t]), rows sorted, columns ascending within a row.
struct SparseActs {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int64_t> row_ptr;  // size rows + 1
  std::vector<int32_t> col;
  std::vector<double> val;

  int64_t nnz() const { return static_cast<int64_t>(col.size()); }
  void init_empty(int64_t r, int64_t c) {
    rows = r;
    cols = c;
    row_ptr.assign(static_cast<size_t>(r) + 1, 0);
    col.clear();
    val.clear();
  }
};

// Column-grouped view of a SparseActs (built once per step, reused by the
// feature-parallel kernels). Entries within a column are row-ascending.
struct SparseActsByCol {
  std::vector<int64_t> col_ptr;  // size cols + 1
  std::vector<int32_t> row;
  std::vector<double> val;
};

SparseActsByCol group_by_col(const SparseActs& a);

// Weight matrices are stored feature-major throughout: encoder and decoder
// are both M x d, one contiguous row per dictionary feature. (The checkpoint
// format stores encoders in the transposed d x M orientation; the IO layer
// converts.)
//
// The kernels below each come in an OpenMP flavour (namespace kern) and a
// plain serial flavour (namespace kern::ref) with identical arithmetic order.
// Every output element is owned by exactly one thread and accumulated in a
// fixed serial order, so the two flavours are bit-identical at any thread
// count. tests/test_kernels.cpp asserts this; tools/bench_kernels compares
// their throughput.
namespace kern {

// out = X * W                 (X: n x d, W: d x m, out: n x m)
void matmul(const Mat& X, const Mat& W, Mat& out);

// out = X * Y^T               (X: n x d, Y: m x d, out: n x m)
void matmul_nt(const Mat& X, const Mat& Y, Mat& out);

// recon[r,:] = bias + sum_j acts(r,j) * Wd[j,:], restricted to features with
// visible[j] != 0 (structural routing; pass nullptr for all-visible).
void sparse_decode(const SparseActs& acts, const Mat& Wd, const std::vector<double>& bias,
                   const uint8_t* visible, Mat& recon);

// gWd[j,:] += sum_r acts(r,j) * G[r,:] over visible features.
void decoder_grad(const SparseActs& acts, const SparseActsByCol& by_col, const Mat& G,
                  const uint8_t* visible, Mat& gWd);

// For sparse per-feature gradients g(r,j):
//   gWe[j,:] += coef[j] * sum_r g(r,j) * X[r,:]
// coef[j] is the encoder routing weight (0, 0.5 or 1).
void encoder_grad(const Mat& X, const SparseActs& g, const SparseActsByCol& by_col,
                  const std::vector<double>& coef, Mat& gWe);

// g_in[r,:] += sum over entries (r,j) of g(r,j) * coef[j] * We[j,:]
// (back-propagation of sparse pre-activation grads into the input rows).
void input_grad(const SparseActs& g, const Mat& We, const std::vector<double>& coef, Mat& g_in);

// Adam with bias correction; t is the 1-based step count.
void adam_update(std::vector<double>& theta, std::vector<double>& m, std::vector<double>& v,
                 const std::vector<double>& g, double lr, double beta1, double beta2, double eps,
                 int64_t t);

void row_norms(const Mat& X, std::vector<double>& out);

namespace ref {
void matmul(const Mat& X, const Mat& W, Mat& out);
void matmul_nt(const Mat& X, const Mat& Y, Mat& out);
void sparse_decode(const SparseActs& acts, const Mat& Wd, const std::vector<double>& bias,
                   const uint8_t* visible, Mat& recon);
void decoder_grad(const SparseActs& acts, const SparseActsByCol& by_col, const Mat& G,
                  const uint8_t* visible, Mat& gWd);
void encoder_grad(const Mat& X, const SparseActs& g, const SparseActsByCol& by_col,
                  const std::vector<double>& coef, Mat& gWe);
void input_grad(const SparseActs& g, const Mat& We, const std::vector<double>& coef, Mat& g_in);
void adam_update(std::vector<double>& theta, std::vector<double>& m, std::vector<double>& v,
                 const std::vector<double>& g, double lr, double beta1, double beta2, double eps,
                 int64_t t);
void row_norms(const Mat& X, std::vector<double>& out);
}  // namespace ref

}  // namespace kern
}  // namespace crossdiff
