#pragma once

// Self-contained property checks behind `romae verify`.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "romae/model.hpp"

namespace romae {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

/// Redraws every parameter at unit scale: matrices N(0, 1/fan_in), norm gains
/// 1 + N(0, 0.5^2), other vectors N(0, 0.5^2). The default init is so small
/// that attention is nearly uniform, which hides positional effects.
void redraw_parameters(Romae& model, std::uint64_t seed);

std::vector<CheckResult> verify_rope(std::uint64_t seed = 1);
std::vector<CheckResult> verify_invariance(std::uint64_t seed = 1);
std::vector<CheckResult> verify_appendix_b(std::uint64_t seed = 1);
std::vector<CheckResult> verify_gradients(std::uint64_t seed = 1);

/// suite: all, rope, invariance, appendixB or gradients.
std::vector<CheckResult> run_verify(const std::string& suite, std::uint64_t seed = 1);
std::vector<std::string> verify_suites();

nlohmann::json to_json(const std::vector<CheckResult>& results);

}  // namespace romae
