#include "romae/positional.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace romae {

void RopeConfig::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ContractError("rope: head_dim must be even and positive, got " + std::to_string(head_dim));
  }
  if (axes == 0 || head_dim % (2 * axes) != 0) {
    throw ContractError("rope: head_dim " + std::to_string(head_dim) + " is not divisible by 2*axes = " +
                        std::to_string(2 * axes));
  }
  if (!(p > 0.0 && p <= 1.0)) throw ContractError("rope: p must lie in (0, 1], got " + std::to_string(p));
  if (!(base > 1.0)) throw ContractError("rope: base must exceed 1");
  if (reserve_variate_axis && axes < 1) throw ContractError("rope: variate axis needs at least one axis");
}

std::vector<double> make_thetas(std::size_t dim, double base) {
  if (dim == 0 || dim % 2 != 0) {
    throw ContractError("make_thetas: dimension must be even and positive, got " + std::to_string(dim));
  }
  if (!(base > 1.0)) throw ContractError("make_thetas: base must exceed 1");
  std::vector<double> th(dim / 2);
  for (std::size_t i = 0; i < th.size(); ++i) {
    th[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
  }
  return th;
}

PRopeSplit truncate_p_rope(std::span<const double> thetas, double p, PRopeKeep keep) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw ContractError("truncate_p_rope: p must lie in (0, 1], got " + std::to_string(p));
  }
  const std::size_t n = thetas.size();
  const auto kept = static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 0.5));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keep == PRopeKeep::Smallest ? thetas[a] < thetas[b] : thetas[a] > thetas[b];
  });
  PRopeSplit split;
  split.rotated.assign(n, 0);
  for (std::size_t i = 0; i < kept; ++i) split.rotated[order[i]] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (split.rotated[i]) {
      split.active.push_back(thetas[i]);
    } else {
      split.identity.push_back(i);
    }
  }
  return split;
}

std::vector<double> rope_rotate(std::span<const double> x, double m, std::span<const double> thetas,
                                std::span<const unsigned char> rotated) {
  if (x.size() != 2 * thetas.size() || (!rotated.empty() && rotated.size() != thetas.size())) {
    throw ContractError("rope_rotate: vector of length " + std::to_string(x.size()) + " needs " +
                        std::to_string(x.size() / 2) + " frequencies, got " +
                        std::to_string(thetas.size()));
  }
  std::vector<double> y(x.begin(), x.end());
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    if (!rotated.empty() && !rotated[i]) continue;
    const double angle = m * thetas[i];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    y[2 * i] = c * x[2 * i] - s * x[2 * i + 1];
    y[2 * i + 1] = s * x[2 * i] + c * x[2 * i + 1];
  }
  return y;
}

std::vector<double> rope_rotate(std::span<const double> x, double m, std::span<const double> thetas) {
  return rope_rotate(x, m, thetas, {});
}

AxialRope::AxialRope(const RopeConfig& config) : config_(config) {
  config_.validate();
  const std::size_t width = config_.axis_width();
  const auto ladder = make_thetas(width, config_.base);
  const auto split = truncate_p_rope(ladder, config_.p, config_.keep);
  for (std::size_t a = 0; a < config_.axes; ++a) {
    for (std::size_t i = 0; i < ladder.size(); ++i) {
      theta_.push_back(ladder[i]);
      axis_.push_back(a);
      rotated_.push_back(split.rotated[i]);
    }
  }
}

std::vector<double> AxialRope::apply(std::span<const double> x, std::span<const double> s) const {
  if (s.size() != config_.axes) {
    throw ContractError("axial_apply: position has " + std::to_string(s.size()) +
                        " coordinates, expected " + std::to_string(config_.axes));
  }
  if (x.size() != config_.head_dim) {
    throw ContractError("axial_apply: vector of length " + std::to_string(x.size()) +
                        " does not match head_dim " + std::to_string(config_.head_dim));
  }
  std::vector<double> y(x.begin(), x.end());
  for (std::size_t p = 0; p < theta_.size(); ++p) {
    if (!rotated_[p]) continue;
    const double angle = s[axis_[p]] * theta_[p];
    const double c = std::cos(angle);
    const double sn = std::sin(angle);
    y[2 * p] = c * x[2 * p] - sn * x[2 * p + 1];
    y[2 * p + 1] = sn * x[2 * p] + c * x[2 * p + 1];
  }
  return y;
}

std::pair<Tensor, Tensor> AxialRope::tables(std::span<const double> positions, std::size_t rows) const {
  if (positions.size() != rows * config_.axes) {
    throw ContractError("rope tables: " + std::to_string(positions.size()) + " coordinates for " +
                        std::to_string(rows) + " rows of " + std::to_string(config_.axes) + " axes");
  }
  const std::size_t n = theta_.size();
  Tensor cos(Shape{rows, n}, 1.0);
  Tensor sin(Shape{rows, n}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = 0; p < n; ++p) {
      if (!rotated_[p]) continue;
      const double angle = positions[r * config_.axes + axis_[p]] * theta_[p];
      cos[r * n + p] = std::cos(angle);
      sin[r * n + p] = std::sin(angle);
    }
  }
  return {std::move(cos), std::move(sin)};
}

std::vector<double> axial_apply(std::span<const double> x, std::span<const double> s,
                                const RopeConfig& cfg) {
  return AxialRope(cfg).apply(x, s);
}

std::vector<double> attach_variate_index(std::span<const double> positions, std::size_t k,
                                         std::span<const std::size_t> variate_ids) {
  if (variate_ids.size() != k || (k != 0 && positions.size() % k != 0)) {
    throw ContractError("attach_variate_index: " + std::to_string(variate_ids.size()) +
                        " variate ids for " + std::to_string(k) + " tokens");
  }
  const std::size_t d_in = k == 0 ? 0 : positions.size() / k;
  std::vector<double> out;
  out.reserve(k * (d_in + 1));
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t a = 0; a < d_in; ++a) out.push_back(positions[t * d_in + a]);
    out.push_back(static_cast<double>(variate_ids[t]));
  }
  return out;
}

std::vector<double> sinusoidal_ape(std::span<const double> positions, std::size_t dim, double base) {
  if (dim == 0 || dim % 2 != 0) {
    throw ContractError("sinusoidal_ape: dim must be even, got " + std::to_string(dim));
  }
  const auto freq = make_thetas(dim, base);
  std::vector<double> out(positions.size() * dim);
  for (std::size_t t = 0; t < positions.size(); ++t) {
    for (std::size_t i = 0; i < freq.size(); ++i) {
      out[t * dim + 2 * i] = std::sin(positions[t] * freq[i]);
      out[t * dim + 2 * i + 1] = std::cos(positions[t] * freq[i]);
    }
  }
  return out;
}

std::vector<double> rope_dot_profile(std::span<const double> psi, double r,
                                     std::span<const double> thetas, std::span<const double> grid) {
  if (psi.size() != 2 * thetas.size()) {
    throw ContractError("rope_dot_profile: psi of length " + std::to_string(psi.size()) + " needs " +
                        std::to_string(psi.size() / 2) + " frequencies");
  }
  std::vector<double> weight(thetas.size());
  double total = 0.0;
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    weight[i] = psi[2 * i] * psi[2 * i] + psi[2 * i + 1] * psi[2 * i + 1];
    total += weight[i];
  }
  if (total == 0.0) throw ContractError("rope_dot_profile: psi must be nonzero");
  std::vector<double> f(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double s = 0.0;
    for (std::size_t i = 0; i < thetas.size(); ++i) s += weight[i] * std::cos((r - grid[g]) * thetas[i]);
    f[g] = s;
  }
  return f;
}

}  // namespace romae
