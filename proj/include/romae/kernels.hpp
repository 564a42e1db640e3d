#pragma once

// Dense numeric kernels behind the tensor ops.
//
// romae::kernels holds the OpenMP-parallel versions used in training.
// romae::kernels::reference holds plain serial loops with the same contracts;
// tests compare the two and the benchmark times them side by side.
//
// Every parallel kernel partitions work over output rows, so each output value
// is produced by exactly one thread with a fixed summation order. Results are
// therefore identical for any thread count.

#include <cstddef>
#include <span>

#include "romae/tensor.hpp"

namespace romae::kernels {

enum class Trans { No, Yes };

/// C = alpha * op(A) * op(B) + beta * C.
void gemm(ConstMatrixView a, Trans ta, ConstMatrixView b, Trans tb, MatrixView c,
          double alpha = 1.0, double beta = 0.0);

/// In-place softmax over each row, stabilized by max subtraction.
void softmax_rows(MatrixView x);

/// y = x / sqrt(mean(x^2) + eps) * gain, row-wise. Writes 1/rms per row to inv_rms.
void rmsnorm_rows(ConstMatrixView x, std::span<const double> gain, double eps, MatrixView y,
                  std::span<double> inv_rms);

/// Rotates adjacent pairs (x[2i], x[2i+1]) of every row segment of width
/// `period` by the per-row angle tables. cos/sin are [rows, period/2]; pairs
/// with active[i] == false are copied unchanged. `sign` = -1 applies the
/// inverse rotation.
void rotate_pairs(ConstMatrixView x, ConstMatrixView cos, ConstMatrixView sin,
                  std::span<const unsigned char> active, std::size_t period, double sign,
                  MatrixView y);

void silu(std::span<const double> x, std::span<double> y);

namespace reference {

void gemm(ConstMatrixView a, Trans ta, ConstMatrixView b, Trans tb, MatrixView c,
          double alpha = 1.0, double beta = 0.0);
void softmax_rows(MatrixView x);
void rmsnorm_rows(ConstMatrixView x, std::span<const double> gain, double eps, MatrixView y,
                  std::span<double> inv_rms);
void rotate_pairs(ConstMatrixView x, ConstMatrixView cos, ConstMatrixView sin,
                  std::span<const unsigned char> active, std::size_t period, double sign,
                  MatrixView y);
void silu(std::span<const double> x, std::span<double> y);

}  // namespace reference

/// Number of threads OpenMP will use (1 when built without OpenMP).
int max_threads();

}  // namespace romae::kernels
