#include "romae/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "romae/rng.hpp"
#include "romae/tape.hpp"

namespace romae {

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Tensor>& params,
                                  const GradCheckOptions& options) {
  std::vector<Tensor> analytic;
  {
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    analytic = grad(tape, loss, params);
  }

  auto eval = [&] {
    NoGradScope off;
    return loss_fn().item();
  };

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param != 0 && coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(options.max_coords_per_param);
    }
    for (std::size_t idx : coords) {
      const double orig = p[idx];
      p[idx] = orig + options.step;
      const double up = eval();
      p[idx] = orig - options.step;
      const double down = eval();
      p[idx] = orig;
      const double fd = (up - down) / (2.0 * options.step);
      const double an = analytic[pi][idx];
      const double denom = std::max({std::abs(fd), std::abs(an), options.abs_floor});
      const double rel = std::abs(fd - an) / denom;
      ++result.coords_checked;
      if (rel > result.max_rel_error || result.coords_checked == 1) {
        result.max_rel_error = rel;
        result.worst_param = pi;
        result.worst_index = idx;
        result.tape_value = an;
        result.fd_value = fd;
      }
    }
  }
  return result;
}

}  // namespace romae
