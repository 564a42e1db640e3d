#include "romae/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "romae/gradcheck.hpp"
#include "romae/positional.hpp"
#include "romae/training.hpp"

namespace romae {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> randn(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

CheckResult below(std::string suite, std::string name, double measured, double threshold, std::string detail) {
  return {std::move(suite), std::move(name), measured <= threshold, measured, threshold, std::move(detail)};
}

TokenBatch random_tokens(std::size_t B, std::size_t k, std::size_t axes, Rng& rng, double spread) {
  TokenBatch b;
  b.batch = B, b.tokens = k, b.patch_size = 1, b.axes = axes;
  b.values = randn(B * k, rng);
  b.positions.resize(B * k * axes);
  for (auto& p : b.positions) p = rng.uniform(0.0, spread);
  b.pad.assign(B * k, 0);
  return b;
}

RomaeConfig probe_config(bool cls, std::size_t axes) {
  RomaeConfig rc;
  rc.encoder = ModelConfig::preset("tiny-shallow");
  rc.encoder.use_cls = cls;
  rc.with_decoder = false;
  rc.axes = axes;
  if (axes == 2) rc.encoder.rope.reserve_variate_axis = true;
  return rc;
}

}  // namespace

void redraw_parameters(Romae& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : model.named_parameters()) {
    const bool gain = p.name.size() >= 4 && p.name.compare(p.name.size() - 4, 4, "norm") == 0;
    const double sd = p.tensor.rank() == 2 ? 1.0 / std::sqrt(static_cast<double>(p.tensor.dim(0))) : 0.5;
    for (auto& v : p.tensor.data()) v = (gain ? 1.0 : 0.0) + rng.normal(0.0, sd);
  }
}

std::vector<CheckResult> verify_rope(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed);

  // <rot(q,m), rot(k,n)> = <rot(q,m-n), k> over continuous positions.
  const auto th = make_thetas(64);
  double worst = 0.0, norm_worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const auto q = randn(64, rng), k = randn(64, rng);
    const double m = rng.uniform(-100.0, 100.0), n = rng.uniform(-100.0, 100.0);
    const auto rq = rope_rotate(q, m, th);
    worst = std::max(worst, std::abs(dot(rq, rope_rotate(k, n, th)) - dot(rope_rotate(q, m - n, th), k)));
    norm_worst = std::max(norm_worst, std::abs(std::sqrt(dot(rq, rq)) - std::sqrt(dot(q, q))));
  }
  out.push_back(below("rope", "relative_identity_1000_trials", worst, 1e-10, "max |lhs - rhs|, head_dim 64"));
  out.push_back(below("rope", "rotation_preserves_norm", norm_worst, 1e-10, "max | |rot q| - |q| |"));

  // p = 0.75 leaves exactly a quarter of the 2D subspaces untouched, bit for bit.
  for (std::size_t hd : {8, 64}) {
    RopeConfig cfg;
    cfg.head_dim = hd;
    cfg.p = 0.75;
    AxialRope rope(cfg);
    const std::size_t pairs = hd / 2;
    std::size_t bad_positions = 0;
    for (int t = 0; t < 100; ++t) {
      const auto x = randn(hd, rng);
      const double s = rng.uniform(-50.0, 50.0);
      const auto y = rope.apply(x, std::span<const double>(&s, 1));
      std::size_t same = 0;
      for (std::size_t p = 0; p < pairs; ++p) same += (y[2 * p] == x[2 * p] && y[2 * p + 1] == x[2 * p + 1]);
      if (same * 4 != pairs) ++bad_positions;
    }
    out.push_back(below("rope", "p075_quarter_identity_head_dim_" + std::to_string(hd),
                        static_cast<double>(bad_positions), 0.0,
                        "positions (of 100) where the bit-identical share of pairs is not 25%"));
  }
  return out;
}

std::vector<CheckResult> verify_invariance(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed);
  {
    Romae m(probe_config(false, 1), seed);
    redraw_parameters(m, seed + 1);
    auto b = random_tokens(2, 12, 1, rng, 50.0);
    double worst = 0.0;
    for (double shift : {7.0, -13.5, 1000.25}) {
      auto s = b;
      for (auto& p : s.positions) p += shift;
      const auto z0 = m.encode(b, {}, {}).z, z1 = m.encode(s, {}, {}).z;
      worst = std::max(worst, max_abs_diff(z0.data(), z1.data()) / max_abs(z0.data()));
    }
    out.push_back(below("invariance", "shift_without_cls", worst, 1e-10,
                        "max relative output change under shifts +7, -13.5, +1000.25"));
  }
  {
    // Time axis shifted, variate axis left alone.
    Romae m(probe_config(false, 2), seed + 2);
    redraw_parameters(m, seed + 3);
    auto b = random_tokens(2, 10, 2, rng, 20.0);
    for (std::size_t t = 0; t < 20; ++t) b.positions[2 * t + 1] = static_cast<double>(t % 3);
    auto s = b;
    for (std::size_t t = 0; t < 20; ++t) s.positions[2 * t] += 7.0;
    const auto z0 = m.encode(b, {}, {}).z, z1 = m.encode(s, {}, {}).z;
    out.push_back(below("invariance", "time_shift_with_variate_axis",
                        max_abs_diff(z0.data(), z1.data()) / max_abs(z0.data()), 1e-10,
                        "relative change; variate axis reserved and unshifted"));
  }
  {
    Romae m(probe_config(true, 1), seed + 4);
    redraw_parameters(m, seed + 5);
    auto b = random_tokens(2, 12, 1, rng, 50.0);
    auto s = b;
    for (auto& p : s.positions) p += 7.0;
    const auto z0 = m.encode(b, {}, {}).z, z1 = m.encode(s, {}, {}).z;
    const double change = max_abs_diff(z0.data(), z1.data());
    out.push_back({"invariance", "shift_with_cls_is_visible", change > 1e-3, change, 1e-3,
                   "max output change under +7 with CLS (must exceed the threshold)"});
  }
  return out;
}

std::vector<CheckResult> verify_appendix_b(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed);
  const auto th = make_thetas(16);
  std::vector<double> grid(1001);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = static_cast<double>(i) / 100.0;
  std::size_t misses = 0;
  double peak_err = 0.0, oracle_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto psi = randn(16, rng);
    const std::size_t ri = rng.index(grid.size());
    const double r = grid[ri];
    const auto f = rope_dot_profile(psi, r, th, grid);
    const auto best = static_cast<std::size_t>(std::max_element(f.begin(), f.end()) - f.begin());
    // A unique maximum: no other grid point ties the peak.
    std::size_t ties = 0;
    for (std::size_t i = 0; i < f.size(); ++i) ties += (i != ri && f[i] >= f[ri]);
    if (best != ri || ties) ++misses;
    peak_err = std::max(peak_err, std::abs(f[ri] - dot(psi, psi)));
    // Independent route: rotate the vectors and take the dot product directly.
    const auto key = rope_rotate(psi, r, th);
    for (std::size_t i = 0; i < f.size(); i += 37) {
      oracle_err = std::max(oracle_err, std::abs(f[i] - dot(rope_rotate(psi, grid[i], th), key)));
    }
  }
  out.push_back(below("appendixB", "argmax_at_r_100_trials", static_cast<double>(misses), 0.0,
                      "trials whose unique grid argmax is not j = r (grid step 0.01 on [0,10])"));
  out.push_back(below("appendixB", "peak_equals_norm_squared", peak_err, 1e-10, "max |f(r) - |psi|^2|"));
  out.push_back(below("appendixB", "profile_matches_rotated_dot", oracle_err, 1e-10,
                      "max |f(j) - <R^j psi, R^r psi>|"));
  return out;
}

std::vector<CheckResult> verify_gradients(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed);
  // A full tiny-shallow pretraining step: encoder, decoder and masked MSE.
  RomaeConfig rc;
  rc.encoder = ModelConfig::preset("tiny-shallow");
  rc.decoder = ModelConfig::preset("tiny-shallow");
  rc.patch_size = 2;
  Romae m(rc, seed);
  Dataset d;
  d.patch_size = 2;
  for (int i = 0; i < 2; ++i) {
    Sample s;
    for (int t = 0; t < 8; ++t) {
      s.positions.push_back(rng.uniform(0.0, 20.0));
      s.values.push_back(std::sin(s.positions.back()));
      s.values.push_back(std::cos(s.positions.back()));
    }
    s.targets = s.values;
    d.samples.push_back(s);
  }
  const std::vector<std::size_t> idx{0, 1};
  const TokenBatch batch = make_batch(d, idx);
  const MaskPlan plan = plan_uniform_mask(batch, 0.75, seed);
  auto loss = [&] {
    Rng drop(seed);
    return masked_reconstruction_loss(m, batch, plan, d, idx, ForwardContext{true, &drop});
  };
  GradCheckOptions opt;
  opt.max_coords_per_param = 4;
  opt.seed = seed;
  const auto r = finite_diff_check(loss, m.parameters(), opt);
  const auto names = m.named_parameters();
  out.push_back(below("gradients", "tiny_shallow_pretrain_step", r.max_rel_error, 1e-4,
                      std::to_string(r.coords_checked) + " coordinates over " + std::to_string(names.size()) +
                          " tensors; worst " + names[r.worst_param].name));

  // Smoothed cross-entropy through a classification head.
  RomaeConfig cc;
  cc.encoder = ModelConfig::preset("tiny-shallow");
  cc.with_decoder = false;
  cc.head = HeadKind::Sequence;
  cc.head_outputs = 2;
  Romae cls(cc, seed + 1);
  Dataset two;
  two.classes = 2;
  for (int i = 0; i < 4; ++i) {
    Sample s;
    s.label = i % 2;
    for (int t = 0; t < 5; ++t) {
      s.values.push_back(rng.normal() + (i % 2 ? 1.0 : -1.0));
      s.positions.push_back(static_cast<double>(t));
    }
    two.samples.push_back(s);
  }
  const std::vector<std::size_t> all{0, 1, 2, 3};
  const TokenBatch cb = make_batch(two, all);
  auto ce = [&] { return supervised_loss(cls, cb, two, all, Task::Classification, 0.9, {}); };
  const auto rc2 = finite_diff_check(ce, cls.parameters(), opt);
  out.push_back(below("gradients", "two_class_finetune_step", rc2.max_rel_error, 1e-4,
                      std::to_string(rc2.coords_checked) + " coordinates"));
  return out;
}

std::vector<std::string> verify_suites() { return {"all", "rope", "invariance", "appendixB", "gradients"}; }

std::vector<CheckResult> run_verify(const std::string& suite, std::uint64_t seed) {
  std::vector<CheckResult> out;
  auto add = [&](std::vector<CheckResult> r) { out.insert(out.end(), r.begin(), r.end()); };
  if (suite == "rope" || suite == "all") add(verify_rope(seed));
  if (suite == "invariance" || suite == "all") add(verify_invariance(seed));
  if (suite == "appendixB" || suite == "all") add(verify_appendix_b(seed));
  if (suite == "gradients" || suite == "all") add(verify_gradients(seed));
  if (out.empty()) throw std::invalid_argument("unknown verify suite '" + suite + "'");
  return out;
}

nlohmann::json to_json(const std::vector<CheckResult>& results) {
  nlohmann::json checks = nlohmann::json::array();
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed;
    checks.push_back({{"suite", r.suite},
                      {"name", r.name},
                      {"passed", r.passed},
                      {"measured", r.measured},
                      {"threshold", r.threshold},
                      {"detail", r.detail}});
  }
  return {{"passed", ok}, {"checks", checks}};
}

}  // namespace romae
