#pragma once

// Rotary positional machinery: frequency generation, p-RoPE truncation,
// continuous rotations, the axial layout for multi-axis positions, the
// variate-index axis, the absolute sinusoidal fallback, and the query/key dot
// product profile used to check absolute-position recoverability.

#include <cstddef>
#include <span>
#include <vector>

#include "romae/tensor.hpp"

namespace romae {

/// Which end of the frequency spectrum p-RoPE keeps rotating.
enum class PRopeKeep { Smallest, Largest };

struct RopeConfig {
  double base = 10000.0;
  double p = 0.75;
  std::size_t axes = 1;
  bool reserve_variate_axis = false;  // last axis carries the variate index
  std::size_t head_dim = 0;
  PRopeKeep keep = PRopeKeep::Smallest;

  /// Throws ContractError unless head_dim is even, divisible by 2*axes, and 0 < p <= 1.
  void validate() const;
  std::size_t axis_width() const { return head_dim / axes; }
};

/// theta_i = base^(-2i/dim) for i = 0 .. dim/2 - 1.
std::vector<double> make_thetas(std::size_t dim, double base = 10000.0);

struct PRopeSplit {
  std::vector<double> active;             // kept frequencies, in input order
  std::vector<std::size_t> identity;      // indices left unrotated
  std::vector<unsigned char> rotated;     // per-index flag, 1 = rotated
};

/// Keeps round-half-up(p * |thetas|) frequencies (the smallest by default) and
/// marks the rest as identity subspaces.
PRopeSplit truncate_p_rope(std::span<const double> thetas, double p,
                           PRopeKeep keep = PRopeKeep::Smallest);

/// Rotates pair i = (x[2i], x[2i+1]) by angle m * thetas[i].
std::vector<double> rope_rotate(std::span<const double> x, double m, std::span<const double> thetas);

/// As above, but pairs with rotated[i] == 0 are returned bit-for-bit unchanged.
std::vector<double> rope_rotate(std::span<const double> x, double m, std::span<const double> thetas,
                                std::span<const unsigned char> rotated);

/// Axial p-RoPE layout over one attention head. The head is split into
/// `axes` contiguous chunks; chunk j is rotated by coordinate j with its own
/// frequency ladder, truncated per chunk.
class AxialRope {
 public:
  explicit AxialRope(const RopeConfig& config);

  const RopeConfig& config() const { return config_; }
  std::size_t pairs() const { return theta_.size(); }
  double theta(std::size_t pair) const { return theta_[pair]; }
  std::size_t axis(std::size_t pair) const { return axis_[pair]; }
  std::span<const unsigned char> rotated() const { return rotated_; }

  /// Rotates a single head vector at position s (|s| == axes).
  std::vector<double> apply(std::span<const double> x, std::span<const double> s) const;

  /// cos/sin angle tables [rows, pairs] for positions laid out [rows, axes].
  std::pair<Tensor, Tensor> tables(std::span<const double> positions, std::size_t rows) const;

 private:
  RopeConfig config_;
  std::vector<double> theta_;
  std::vector<std::size_t> axis_;
  std::vector<unsigned char> rotated_;
};

/// Convenience wrapper: AxialRope(cfg).apply(x, s).
std::vector<double> axial_apply(std::span<const double> x, std::span<const double> s,
                                const RopeConfig& cfg);

/// Appends the variate id of each of the k tokens as an extra (last) position
/// axis: [k, D-1] + [k] -> [k, D].
std::vector<double> attach_variate_index(std::span<const double> positions, std::size_t k,
                                         std::span<const std::size_t> variate_ids);

/// Fixed sin/cos table [k, dim]: row t holds sin(pos_t w_i), cos(pos_t w_i)
/// in adjacent columns with w_i = base^(-2i/dim).
std::vector<double> sinusoidal_ape(std::span<const double> positions, std::size_t dim,
                                   double base = 10000.0);

/// f(j) = sum_i |psi_i|^2 cos((r - j) theta_i): the rotated dot product of a
/// query psi at position j with a position-0 key built as R^r psi.
std::vector<double> rope_dot_profile(std::span<const double> psi, double r,
                                     std::span<const double> thetas, std::span<const double> grid);

}  // namespace romae
