#include "romae/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace romae::kernels {
namespace {

constexpr std::size_t kTileRows = 8;
constexpr std::size_t kTileCols = 16;
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kParallelWork = 1u << 16;

struct Dense {
  const double* data;
  std::size_t rows, cols, stride;
};

std::vector<double> transpose_copy(ConstMatrixView m) {
  std::vector<double> out(m.rows * m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) out[c * m.rows + r] = m(r, c);
  }
  return out;
}

inline void store_tile(const double* acc, std::size_t acc_stride, std::size_t mr, std::size_t nr,
                       double* c, std::size_t ldc, double alpha, double beta) {
  for (std::size_t r = 0; r < mr; ++r) {
    double* crow = c + r * ldc;
    const double* arow = acc + r * acc_stride;
    if (beta == 0.0) {
      for (std::size_t j = 0; j < nr; ++j) crow[j] = alpha * arow[j];
    } else {
      for (std::size_t j = 0; j < nr; ++j) crow[j] = alpha * arow[j] + beta * crow[j];
    }
  }
}

void full_tile(const Dense& a, const Dense& b, std::size_t i, std::size_t j, double* c,
               std::size_t ldc, double alpha, double beta) {
  alignas(64) double acc[kTileRows][kTileCols] = {};
  const std::size_t k_end = a.cols;
  for (std::size_t k = 0; k < k_end; ++k) {
    const double* brow = b.data + k * b.stride + j;
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const double av = a.data[(i + r) * a.stride + k];
#pragma omp simd
      for (std::size_t cc = 0; cc < kTileCols; ++cc) acc[r][cc] += av * brow[cc];
    }
  }
  store_tile(&acc[0][0], kTileCols, kTileRows, kTileCols, c + i * ldc + j, ldc, alpha, beta);
}

void edge_tile(const Dense& a, const Dense& b, std::size_t i, std::size_t j, std::size_t mr,
               std::size_t nr, double* c, std::size_t ldc, double alpha, double beta) {
  alignas(64) double acc[kTileRows][kTileCols] = {};
  for (std::size_t k = 0; k < a.cols; ++k) {
    const double* brow = b.data + k * b.stride + j;
    for (std::size_t r = 0; r < mr; ++r) {
      const double av = a.data[(i + r) * a.stride + k];
      for (std::size_t cc = 0; cc < nr; ++cc) acc[r][cc] += av * brow[cc];
    }
  }
  store_tile(&acc[0][0], kTileCols, mr, nr, c + i * ldc + j, ldc, alpha, beta);
}

void gemm_nn(const Dense& a, const Dense& b, MatrixView c, double alpha, double beta) {
  const std::size_t m = a.rows;
  const std::size_t n = b.cols;
  const std::size_t row_blocks = (m + kTileRows - 1) / kTileRows;
  const bool parallel = m * n * a.cols >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(row_blocks); ++blk) {
    const std::size_t i = static_cast<std::size_t>(blk) * kTileRows;
    const std::size_t mr = std::min(kTileRows, m - i);
    for (std::size_t j = 0; j < n; j += kTileCols) {
      const std::size_t nr = std::min(kTileCols, n - j);
      if (mr == kTileRows && nr == kTileCols) {
        full_tile(a, b, i, j, c.data, c.stride, alpha, beta);
      } else {
        edge_tile(a, b, i, j, mr, nr, c.data, c.stride, alpha, beta);
      }
    }
  }
}

void check_gemm_shapes(ConstMatrixView a, Trans ta, ConstMatrixView b, Trans tb, MatrixView c) {
  const std::size_t m = ta == Trans::No ? a.rows : a.cols;
  const std::size_t ka = ta == Trans::No ? a.cols : a.rows;
  const std::size_t kb = tb == Trans::No ? b.rows : b.cols;
  const std::size_t n = tb == Trans::No ? b.cols : b.rows;
  if (ka != kb || c.rows != m || c.cols != n) {
    throw DimensionError("gemm: op(A) is " + std::to_string(m) + "x" + std::to_string(ka) +
                         ", op(B) is " + std::to_string(kb) + "x" + std::to_string(n) + ", C is " +
                         std::to_string(c.rows) + "x" + std::to_string(c.cols));
  }
}

}  // namespace

void gemm(ConstMatrixView a, Trans ta, ConstMatrixView b, Trans tb, MatrixView c, double alpha,
          double beta) {
  check_gemm_shapes(a, ta, b, tb, c);
  if (c.rows == 0 || c.cols == 0) return;
  std::vector<double> at;
  std::vector<double> bt;
  Dense da{a.data, a.rows, a.cols, a.stride};
  Dense db{b.data, b.rows, b.cols, b.stride};
  if (ta == Trans::Yes) {
    at = transpose_copy(a);
    da = {at.data(), a.cols, a.rows, a.rows};
  }
  if (tb == Trans::Yes) {
    bt = transpose_copy(b);
    db = {bt.data(), b.cols, b.rows, b.rows};
  }
  gemm_nn(da, db, c, alpha, beta);
}

void softmax_rows(MatrixView x) {
  const bool parallel = x.rows * x.cols >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(x.rows); ++r) {
    double* row = x.data + static_cast<std::size_t>(r) * x.stride;
    double mx = row[0];
    for (std::size_t c = 1; c < x.cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < x.cols; ++c) row[c] *= inv;
  }
}

void rmsnorm_rows(ConstMatrixView x, std::span<const double> gain, double eps, MatrixView y,
                  std::span<double> inv_rms) {
  const bool parallel = x.rows * x.cols >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t rr = 0; rr < static_cast<std::ptrdiff_t>(x.rows); ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const double* xr = x.data + r * x.stride;
    double* yr = y.data + r * y.stride;
    double ss = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) ss += xr[c] * xr[c];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols) + eps);
    inv_rms[r] = inv;
#pragma omp simd
    for (std::size_t c = 0; c < x.cols; ++c) yr[c] = xr[c] * inv * gain[c];
  }
}

void rotate_pairs(ConstMatrixView x, ConstMatrixView cos, ConstMatrixView sin,
                  std::span<const unsigned char> active, std::size_t period, double sign,
                  MatrixView y) {
  const std::size_t half = period / 2;
  const bool parallel = x.rows * x.cols >= kParallelWork / 4;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t rr = 0; rr < static_cast<std::ptrdiff_t>(x.rows); ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const double* xr = x.data + r * x.stride;
    double* yr = y.data + r * y.stride;
    const double* cr = cos.data + r * cos.stride;
    const double* sr = sin.data + r * sin.stride;
    for (std::size_t base = 0; base < x.cols; base += period) {
      for (std::size_t p = 0; p < half; ++p) {
        const double a = xr[base + 2 * p];
        const double b = xr[base + 2 * p + 1];
        if (!active[p]) {
          yr[base + 2 * p] = a;
          yr[base + 2 * p + 1] = b;
          continue;
        }
        const double cs = cr[p];
        const double sn = sign * sr[p];
        yr[base + 2 * p] = cs * a - sn * b;
        yr[base + 2 * p + 1] = sn * a + cs * b;
      }
    }
  }
}

void silu(std::span<const double> x, std::span<double> y) {
  const bool parallel = x.size() >= kParallelWork / 4;
#pragma omp parallel for simd schedule(static) if (parallel)
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / (1.0 + std::exp(-x[i]));
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace reference {

void gemm(ConstMatrixView a, Trans ta, ConstMatrixView b, Trans tb, MatrixView c, double alpha,
          double beta) {
  check_gemm_shapes(a, ta, b, tb, c);
  const std::size_t k_dim = ta == Trans::No ? a.cols : a.rows;
  for (std::size_t i = 0; i < c.rows; ++i) {
    for (std::size_t j = 0; j < c.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < k_dim; ++k) {
        const double av = ta == Trans::No ? a(i, k) : a(k, i);
        const double bv = tb == Trans::No ? b(k, j) : b(j, k);
        s += av * bv;
      }
      c(i, j) = beta == 0.0 ? alpha * s : alpha * s + beta * c(i, j);
    }
  }
}

void softmax_rows(MatrixView x) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mx = x(r, 0);
    for (std::size_t c = 1; c < x.cols; ++c) mx = std::max(mx, x(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) sum += std::exp(x(r, c) - mx);
    for (std::size_t c = 0; c < x.cols; ++c) x(r, c) = std::exp(x(r, c) - mx) / sum;
  }
}

void rmsnorm_rows(ConstMatrixView x, std::span<const double> gain, double eps, MatrixView y,
                  std::span<double> inv_rms) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) ss += x(r, c) * x(r, c);
    const double rms = std::sqrt(ss / static_cast<double>(x.cols) + eps);
    inv_rms[r] = 1.0 / rms;
    for (std::size_t c = 0; c < x.cols; ++c) y(r, c) = x(r, c) / rms * gain[c];
  }
}

void rotate_pairs(ConstMatrixView x, ConstMatrixView cos, ConstMatrixView sin,
                  std::span<const unsigned char> active, std::size_t period, double sign,
                  MatrixView y) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = 0; c < x.cols; c += 2) {
      const std::size_t p = (c % period) / 2;
      const double a = x(r, c);
      const double b = x(r, c + 1);
      if (!active[p]) {
        y(r, c) = a;
        y(r, c + 1) = b;
      } else {
        const double cs = cos(r, p);
        const double sn = sign * sin(r, p);
        y(r, c) = cs * a - sn * b;
        y(r, c + 1) = sn * a + cs * b;
      }
    }
  }
}

void silu(std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / (1.0 + std::exp(-x[i]));
}

}  // namespace reference
}  // namespace romae::kernels
