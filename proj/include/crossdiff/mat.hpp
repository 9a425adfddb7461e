#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "crossdiff/errors.hpp"

namespace crossdiff {

// Dense row-major matrix of doubles. Deliberately minimal: the hot paths live
// in kernels.hpp and operate on raw rows.
struct Mat {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), 0.0) {}

  double* row(int64_t r) { return data.data() + r * cols; }
  const double* row(int64_t r) const { return data.data() + r * cols; }

  double& at(int64_t r, int64_t c) { return data[r * cols + c]; }
  double at(int64_t r, int64_t c) const { return data[r * cols + c]; }

  void set_zero() { std::fill(data.begin(), data.end(), 0.0); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// Eight independent accumulators (one SIMD lane each) so the loop vectorizes
// without changing the fixed, deterministic summation order between callers.
inline double dot(const double* a, const double* b, int64_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  const double s01 = acc[0] + acc[1], s23 = acc[2] + acc[3];
  const double s45 = acc[4] + acc[5], s67 = acc[6] + acc[7];
  return ((s01 + s23) + (s45 + s67)) + tail;
}

inline double l2_norm(const double* a, int64_t n) { return std::sqrt(dot(a, a, n)); }

inline void require_shape(const Mat& m, int64_t r, int64_t c, const char* name) {
  if (m.rows != r || m.cols != c) {
    throw shape_error(std::string(name) + ": expected " + std::to_string(r) + "x" +
                      std::to_string(c) + ", got " + std::to_string(m.rows) + "x" +
                      std::to_string(m.cols));
  }
}

// Median of a copy of the values; even counts average the two middle elements.
double median(std::vector<double> values);

}  // namespace crossdiff
