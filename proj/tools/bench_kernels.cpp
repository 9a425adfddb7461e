// Throughput comparison of the OpenMP kernels against their serial reference
// twins on training-shaped inputs.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>

#include "crossdiff/kernels.hpp"
#include "crossdiff/rng.hpp"

using namespace crossdiff;

namespace {

Mat random_mat(int64_t r, int64_t c, Rng& rng) {
  Mat m(r, c);
  for (double& v : m.data) v = rng.next_gaussian();
  return m;
}

SparseActs random_sparse(int64_t rows, int64_t cols, int64_t per_row, Rng& rng) {
  SparseActs s;
  s.init_empty(rows, cols);
  for (int64_t r = 0; r < rows; ++r) {
    std::vector<int32_t> picks;
    for (int64_t t = 0; t < per_row; ++t)
      picks.push_back(static_cast<int32_t>(rng.next_u64() % cols));
    std::sort(picks.begin(), picks.end());
    picks.erase(std::unique(picks.begin(), picks.end()), picks.end());
    for (int32_t c : picks) {
      s.col.push_back(c);
      s.val.push_back(rng.next_double() + 0.1);
    }
    s.row_ptr[r + 1] = s.nnz();
  }
  return s;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double omp_ms) {
  std::printf("%-22s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx\n", name, serial_ms, omp_ms,
              serial_ms / omp_ms);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  Rng rng(12345);

  const int64_t batch = 256, d = 64, M = 512, k = 8;
  const Mat X = random_mat(batch, d, rng);
  const Mat W = random_mat(d, M, rng);
  const Mat F = random_mat(M, d, rng);  // feature-major weights
  const Mat G = random_mat(batch, d, rng);
  const SparseActs acts = random_sparse(batch, M, k, rng);
  const SparseActsByCol by_col = group_by_col(acts);
  const std::vector<double> bias(d, 0.1);
  const std::vector<double> coef(M, 0.5);

  {
    Mat out;
    report("matmul (b x d x M)",
           time_ms([&] { kern::ref::matmul(X, W, out); }, 20),
           time_ms([&] { kern::matmul(X, W, out); }, 20));
  }
  {
    Mat out;
    report("matmul_nt (encode)",
           time_ms([&] { kern::ref::matmul_nt(X, F, out); }, 20),
           time_ms([&] { kern::matmul_nt(X, F, out); }, 20));
  }
  {
    Mat out;
    report("sparse_decode",
           time_ms([&] { kern::ref::sparse_decode(acts, F, bias, nullptr, out); }, 50),
           time_ms([&] { kern::sparse_decode(acts, F, bias, nullptr, out); }, 50));
  }
  {
    Mat g(M, d);
    report("decoder_grad",
           time_ms([&] { g.set_zero(); kern::ref::decoder_grad(acts, by_col, G, nullptr, g); }, 50),
           time_ms([&] { g.set_zero(); kern::decoder_grad(acts, by_col, G, nullptr, g); }, 50));
  }
  {
    Mat g(M, d);
    report("encoder_grad",
           time_ms([&] { g.set_zero(); kern::ref::encoder_grad(X, acts, by_col, coef, g); }, 50),
           time_ms([&] { g.set_zero(); kern::encoder_grad(X, acts, by_col, coef, g); }, 50));
  }
  {
    std::vector<double> theta(M * d, 0.1), m(M * d, 0.0), v(M * d, 0.0), g(M * d, 0.01);
    report("adam_update",
           time_ms([&] { kern::ref::adam_update(theta, m, v, g, 1e-4, 0.9, 0.999, 1e-8, 5); }, 50),
           time_ms([&] { kern::adam_update(theta, m, v, g, 1e-4, 0.9, 0.999, 1e-8, 5); }, 50));
  }
  return 0;
}
