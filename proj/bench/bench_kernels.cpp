// Times the OpenMP kernels against the serial reference versions at the
// shapes a tiny-model training step hits, plus one full step.
//
//   bench_kernels [--reps N] [--json]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "romae/kernels.hpp"
#include "romae/rng.hpp"
#include "romae/training.hpp"

using namespace romae;
namespace k = romae::kernels;

namespace {

double best_of(int reps, const std::function<void()>& fn) {
  double best = INFINITY;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

std::vector<double> noise(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

MatrixView out(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return as_matrix(std::span<double>(v), rows, cols);
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct Row {
  std::string kernel, shape;
  double reference = 0.0, parallel = 0.0, flops = 0.0, diff = 0.0;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel benchmark: parallel vs serial reference"};
  int reps = 5;
  bool as_json = false;
  app.add_option("--reps", reps, "Repetitions; the best time is kept")->check(CLI::PositiveNumber);
  app.add_flag("--json", as_json, "Print JSON instead of a table");
  CLI11_PARSE(app, argc, argv);

  Rng rng(42);
  std::vector<Row> rows;

  // Token batch 64 x 11 through the tiny MLP, and one attention score block.
  for (auto [m, n, kk] : {std::tuple<std::size_t, std::size_t, std::size_t>{704, 720, 180},
                          {704, 180, 720},
                          {704, 180, 180},
                          {11, 11, 60}}) {
    const auto a = noise(m * kk, rng), b = noise(kk * n, rng);
    std::vector<double> c1(m * n), c2(m * n);
    Row r{"gemm", std::to_string(m) + "x" + std::to_string(kk) + " * " + std::to_string(kk) + "x" + std::to_string(n)};
    const int inner = m * n * kk < 100000 ? 2000 : 1;
    r.reference = best_of(reps, [&] {
                    for (int i = 0; i < inner; ++i)
                      k::reference::gemm(as_matrix(a, m, kk), k::Trans::No, as_matrix(b, kk, n), k::Trans::No,
                                         out(c1, m, n));
                  }) / inner;
    r.parallel = best_of(reps, [&] {
                   for (int i = 0; i < inner; ++i)
                     k::gemm(as_matrix(a, m, kk), k::Trans::No, as_matrix(b, kk, n), k::Trans::No,
                             out(c2, m, n));
                 }) / inner;
    r.flops = 2.0 * m * n * kk;
    r.diff = max_diff(c1, c2);
    rows.push_back(r);
  }
  {
    const std::size_t m = 704 * 3, n = 11;
    const auto x = noise(m * n, rng);
    auto y1 = x, y2 = x;
    Row r{"softmax_rows", std::to_string(m) + "x" + std::to_string(n)};
    r.reference = best_of(reps, [&] { y1 = x, k::reference::softmax_rows(out(y1, m, n)); });
    r.parallel = best_of(reps, [&] { y2 = x, k::softmax_rows(out(y2, m, n)); });
    r.diff = max_diff(y1, y2);
    rows.push_back(r);
  }
  {
    const std::size_t m = 704, n = 180;
    const auto x = noise(m * n, rng), g = noise(n, rng);
    std::vector<double> y1(m * n), y2(m * n), i1(m), i2(m);
    Row r{"rmsnorm_rows", std::to_string(m) + "x" + std::to_string(n)};
    r.reference = best_of(reps, [&] { k::reference::rmsnorm_rows(as_matrix(x, m, n), g, 1e-6, out(y1, m, n), i1); });
    r.parallel = best_of(reps, [&] { k::rmsnorm_rows(as_matrix(x, m, n), g, 1e-6, out(y2, m, n), i2); });
    r.diff = max_diff(y1, y2);
    rows.push_back(r);
  }
  {
    const std::size_t m = 704 * 3, n = 60;
    const auto x = noise(m * n, rng), cs = noise(m * n / 2, rng), sn = noise(m * n / 2, rng);
    std::vector<unsigned char> active(n / 2, 1);
    std::fill(active.begin() + 22, active.end(), 0);
    std::vector<double> y1(m * n), y2(m * n);
    Row r{"rotate_pairs", std::to_string(m) + "x" + std::to_string(n)};
    r.reference = best_of(reps, [&] {
      k::reference::rotate_pairs(as_matrix(x, m, n), as_matrix(cs, m, n / 2), as_matrix(sn, m, n / 2), active, n, 1.0,
                                 out(y1, m, n));
    });
    r.parallel = best_of(reps, [&] {
      k::rotate_pairs(as_matrix(x, m, n), as_matrix(cs, m, n / 2), as_matrix(sn, m, n / 2), active, n, 1.0,
                      out(y2, m, n));
    });
    r.diff = max_diff(y1, y2);
    rows.push_back(r);
  }
  {
    const std::size_t n = 704 * 720;
    const auto x = noise(n, rng);
    std::vector<double> y1(n), y2(n);
    Row r{"silu", std::to_string(n)};
    r.reference = best_of(reps, [&] { k::reference::silu(x, y1); });
    r.parallel = best_of(reps, [&] { k::silu(x, y2); });
    r.diff = max_diff(y1, y2);
    rows.push_back(r);
  }

  // One full tiny-shallow pretraining step for scale.
  double step_seconds = 0.0;
  {
    RomaeConfig rc;
    rc.encoder = ModelConfig::preset("tiny-shallow");
    Romae model(rc, 1);
    Dataset d;
    for (int i = 0; i < 64; ++i) {
      Sample s;
      for (int t = 0; t < 10; ++t) {
        s.positions.push_back(rng.uniform(0.0, 50.0));
        s.values.push_back(rng.normal());
      }
      s.targets = s.values;
      d.samples.push_back(s);
    }
    std::vector<std::size_t> idx(64);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto batch = make_batch(d, idx);
    const auto plan = plan_uniform_mask(batch, 0.75, 1);
    OptimizerConfig oc;
    auto opt = init_optimizer(oc, model.parameters());
    step_seconds = best_of(reps, [&] { pretrain_step(model, batch, plan, d, idx, opt, {1e-4}, {}); });
  }

  if (as_json) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
      j.push_back({{"kernel", r.kernel}, {"shape", r.shape}, {"reference_s", r.reference}, {"parallel_s", r.parallel},
                   {"max_abs_diff", r.diff}});
    std::cout << nlohmann::json{{"threads", k::max_threads()}, {"kernels", j}, {"pretrain_step_s", step_seconds}}.dump(2)
              << "\n";
    return 0;
  }
  std::printf("threads: %d\n\n", k::max_threads());
  std::printf("%-13s %-22s %12s %12s %8s %10s %10s\n", "kernel", "shape", "reference", "parallel", "speedup",
              "GFLOP/s", "max diff");
  for (const auto& r : rows) {
    std::printf("%-13s %-22s %10.3f ms %9.3f ms %7.2fx ", r.kernel.c_str(), r.shape.c_str(), r.reference * 1e3,
                r.parallel * 1e3, r.reference / r.parallel);
    if (r.flops > 0) std::printf("%10.1f ", r.flops / r.parallel * 1e-9);
    else std::printf("%10s ", "-");
    std::printf("%10.2e\n", r.diff);
  }
  std::printf("\ntiny-shallow pretrain step, batch 64 x 10 tokens: %.1f ms\n", step_seconds * 1e3);
  return 0;
}
