#pragma once

// Differentiable tensor operations. Each op computes its value eagerly and,
// when a tape is active and an input requires a gradient, records a backward
// closure on it.

#include <cstddef>
#include <span>
#include <vector>

#include "romae/rng.hpp"
#include "romae/tensor.hpp"

namespace romae {

/// Matrix product over the last two axes. Leading (batch) axes broadcast
/// numpy-style; a rank-2 right operand is shared across all batches.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise arithmetic. `b` must have the same shape as `a` or a shape equal
// to a trailing suffix of a's shape (including the empty shape), in which case
// it is tiled.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor silu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);

/// RMS normalization over the last axis, scaled by a learned gain.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

Tensor reshape(const Tensor& x, Shape shape);

/// Treats `src` as a table of rows (last axis = row width) and returns rows
/// `index[i]`; a negative index produces a zero row. The result has shape
/// `out_shape`, whose last extent must equal the row width.
Tensor gather_rows(const Tensor& src, std::span<const std::ptrdiff_t> index, Shape out_shape);

/// Stacks row tables that share a row width into one [total_rows, width] table.
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Rotates adjacent coordinate pairs of every `period`-wide segment of each
/// row. cos/sin are [rows, period/2] angle tables (constants); pairs with
/// active[p] == 0 pass through untouched.
Tensor rotate_pairs(const Tensor& x, const Tensor& cos, const Tensor& sin,
                    std::span<const unsigned char> active, std::size_t period);

/// Multi-head scaled dot-product attention over [batch, tokens, width] inputs
/// split into `heads` contiguous head slices. Keys with key_pad[b*T + j] != 0
/// receive zero weight. Dropout with probability `dropout` is applied to the
/// attention weights when `rng` is non-null.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const unsigned char> key_pad, double dropout = 0.0, Rng* rng = nullptr);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Multiplies slice i of the leading axis by factors[i] (constants).
Tensor scale_rows(const Tensor& x, std::span<const double> factors);

/// Mean over rows of x [B, T, W] restricted to positions where keep[b*T+t] != 0.
Tensor masked_mean_rows(const Tensor& x, std::span<const unsigned char> keep);

/// Mean squared error against a constant target of the same shape.
Tensor mse(const Tensor& pred, const Tensor& target);

/// Mean over rows of -sum_c target[c] * log_softmax(logits)[c].
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets);

}  // namespace romae
