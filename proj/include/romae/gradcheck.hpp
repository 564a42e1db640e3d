#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "romae/tensor.hpp"

namespace romae {

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |tape - fd| / max(|tape|, |fd|, abs_floor). At step
  // 1e-5 the central difference of an O(1) loss carries ~1e-10 of roundoff,
  // so gradients below the floor are judged on an absolute scale instead.
  double abs_floor = 1e-6;
  // Coordinates probed per parameter tensor; 0 probes all of them.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double tape_value = 0.0;
  double fd_value = 0.0;
  std::size_t coords_checked = 0;
};

/// Compares tape gradients of the scalar `loss_fn` against central finite
/// differences. `loss_fn` must be deterministic in the parameter values; it is
/// called once under a tape and twice per probed coordinate without one.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Tensor>& params,
                                  const GradCheckOptions& options = {});

}  // namespace romae
