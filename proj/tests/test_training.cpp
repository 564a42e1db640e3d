#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "romae/datasets.hpp"
#include "romae/gradcheck.hpp"
#include "romae/ops.hpp"
#include "romae/tape.hpp"
#include "romae/training.hpp"
#include "test_util.hpp"

using namespace romae;
using romae::test::small_model;

namespace {

Dataset toy_recon(std::size_t n, std::size_t k, std::size_t np, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.patch_size = np;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    for (std::size_t t = 0; t < k; ++t) {
      s.positions.push_back(rng.uniform(0.0, 10.0));
      for (std::size_t j = 0; j < np; ++j) s.values.push_back(std::sin(s.positions.back() + j) + 0.1 * rng.normal());
    }
    s.targets = s.values;
    d.samples.push_back(std::move(s));
  }
  return d;
}

Dataset toy_classes(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.label = static_cast<long>(i % 2);
    for (std::size_t t = 0; t < 4; ++t) {
      s.values.push_back((s.label ? 1.0 : -1.0) + 0.3 * rng.normal());
      s.positions.push_back(static_cast<double>(t));
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::vector<std::size_t> iota_idx(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("romae_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

RunConfig pretrain_cfg() {
  RunConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.warmup_steps = 2;
  c.optimizer.lr = 1e-3;
  c.optimizer.weight_decay = 0.01;
  c.clip = 1.0;
  c.mask_ratio = 0.5;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("uniform masking hides the rounded fraction of every sequence") {
  Dataset d = toy_recon(3, 16, 1, 1);
  d.samples[1].values.resize(7), d.samples[1].positions.resize(7), d.samples[1].targets.resize(7);
  auto idx = iota_idx(3);
  auto b = make_batch(d, idx);
  auto plan = plan_uniform_mask(b, 0.75, 5);
  auto hidden = [&](std::size_t s) {
    return std::count(plan.masked.begin() + s * 16, plan.masked.begin() + (s + 1) * 16, 1);
  };
  CHECK(hidden(0) == 12);
  CHECK(hidden(1) == 5);  // round(5.25)
  CHECK(hidden(2) == 12);
  for (std::size_t t = 7; t < 16; ++t) CHECK(plan.masked[16 + t] == 0);
  CHECK(plan_uniform_mask(b, 0.75, 5).masked == plan.masked);
  CHECK(plan_uniform_mask(b, 0.75, 6).masked != plan.masked);

  Dataset two = toy_recon(1, 2, 1, 2);
  auto b2 = make_batch(two, iota_idx(1));
  for (double r : {0.05, 0.25, 0.5, 0.75, 0.95}) {
    auto p = plan_uniform_mask(b2, r, 1);
    CHECK(p.masked[0] + p.masked[1] == 1);
  }
  CHECK_THROWS_AS(plan_uniform_mask(b, 0.0, 1), ContractError);
  CHECK_THROWS_AS(plan_uniform_mask(b, 1.0, 1), ContractError);
  Dataset one = toy_recon(1, 1, 1, 3);
  CHECK_THROWS_AS(plan_uniform_mask(make_batch(one, iota_idx(1)), 0.5, 1), ContractError);
}

TEST_CASE("mask selection is uniform over tokens") {
  Dataset d = toy_recon(1, 10, 1, 4);
  auto b = make_batch(d, iota_idx(1));
  std::vector<double> freq(10);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    auto p = plan_uniform_mask(b, 0.3, static_cast<std::uint64_t>(i));
    for (std::size_t t = 0; t < 10; ++t) freq[t] += p.masked[t];
  }
  for (double f : freq) CHECK(std::abs(f / draws - 0.3) / 0.3 < 0.02);
}

TEST_CASE("label smoothing") {
  CHECK(smooth_labels(2, 1.0, 4) == std::vector<double>{0, 0, 1, 0});
  auto a = smooth_labels(3, 0.9, 10);
  CHECK(a[3] == 0.9);
  for (std::size_t i = 0; i < 10; ++i)
    if (i != 3) CHECK(a[i] == doctest::Approx(0.01).epsilon(1e-12));
  auto b = smooth_labels(0, 0.8, 4);
  CHECK(b[0] == 0.8);
  CHECK(b[1] == doctest::Approx(0.05).epsilon(1e-12));
  // Entries stay in [0,1] and the correct class dominates above the threshold.
  for (std::size_t n : {2, 3, 10, 100}) {
    const double threshold = 1.0 / (1.0 + (n - 1.0) / n);
    for (double c : {0.05, 0.3, 0.5, 0.51, 0.7, 0.99, 1.0}) {
      auto t = smooth_labels(0, c, n);
      for (double v : t) CHECK((v >= 0.0 && v <= 1.0));
      if (c > threshold) CHECK(t[0] > t[1]);
    }
  }
  CHECK_THROWS_AS(smooth_labels(0, 0.0, 3), ContractError);
  CHECK_THROWS_AS(smooth_labels(3, 0.9, 3), ContractError);
}

TEST_CASE("masked reconstruction loss reads only hidden targets") {
  Romae m(small_model(true), 1);
  Dataset d = toy_recon(3, 6, 1, 5);
  auto idx = iota_idx(3);
  auto b = make_batch(d, idx);
  auto plan = plan_uniform_mask(b, 0.5, 9);
  const ForwardContext ctx{};
  const double base = masked_reconstruction_loss(m, b, plan, d, idx, ctx).item();

  Dataset moved = d;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t t = 0; t < 6; ++t)
      if (!plan.masked[s * 6 + t]) moved.samples[s].targets[t] += 100.0;
  CHECK(masked_reconstruction_loss(m, b, plan, moved, idx, ctx).item() == base);

  // Targets equal to the model's own predictions give exactly zero.
  auto rec = m.reconstruct(b, plan, ctx);
  Dataset perfect = d;
  for (std::size_t r = 0; r < rec.token.size(); ++r) {
    if (rec.token[r] < 0) continue;
    const auto tok = static_cast<std::size_t>(rec.token[r]);
    perfect.samples[tok / 6].targets[tok % 6] = rec.values[r];
  }
  CHECK(masked_reconstruction_loss(m, b, plan, perfect, idx, ctx).item() == 0.0);

  // Hand MSE over the hidden values.
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < rec.token.size(); ++r) {
    if (rec.token[r] < 0) continue;
    const auto tok = static_cast<std::size_t>(rec.token[r]);
    const double e = rec.values[r] - d.samples[tok / 6].targets[tok % 6];
    acc += e * e;
    ++n;
  }
  CHECK(n == 9);
  CHECK(base == doctest::Approx(acc / n).epsilon(1e-12));
}

TEST_CASE("pretraining overfits a fixed batch") {
  Romae m(small_model(true, 1, 2), 2);
  Dataset d = toy_recon(4, 8, 2, 6);
  for (auto& s : d.samples) {
    for (auto& v : s.values) v += 1.5;
    s.targets = s.values;
  }
  auto idx = iota_idx(4);
  auto b = make_batch(d, idx);
  auto plan = plan_uniform_mask(b, 0.5, 3);
  OptimizerConfig oc;
  oc.lr = 3e-3;
  auto opt = init_optimizer(oc, m.parameters());
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(pretrain_step(m, b, plan, d, idx, opt, {3e-3, 1.0}, {}));
  CHECK(losses.back() < 0.5 * losses.front());
  CHECK(opt.step == 50);
}

TEST_CASE("classification loss gradient matches finite differences") {
  auto cfg = small_model(true);
  cfg.with_decoder = false;
  cfg.head = HeadKind::Sequence;
  cfg.head_outputs = 2;
  Romae m(cfg, 3);
  test::randomize_parameters(m, 4);
  Dataset d = toy_classes(4, 7);
  auto idx = iota_idx(4);
  auto b = make_batch(d, idx);
  auto loss = [&] { return supervised_loss(m, b, d, idx, Task::Classification, 0.9, {}); };
  GradCheckOptions opt;
  opt.max_coords_per_param = 6;
  auto r = finite_diff_check(loss, m.parameters(), opt);
  CHECK(r.max_rel_error <= 1e-4);
  CHECK(r.coords_checked > 50);
}

TEST_CASE("saturated logits give near-zero cross-entropy") {
  std::vector<double> logits{50.0, 0.0, 0.0, 0.0, 0.0, 50.0};
  std::vector<double> target;
  for (std::size_t l : {0, 2}) {
    auto t = smooth_labels(l, 1.0, 3);
    target.insert(target.end(), t.begin(), t.end());
  }
  const double ce = soft_cross_entropy(Tensor(Shape{2, 3}, logits), Tensor(Shape{2, 3}, target)).item();
  CHECK(ce < 1e-20);
}

TEST_CASE("two-output sequence regression trains") {
  auto cfg = small_model(true);
  cfg.with_decoder = false;
  cfg.head = HeadKind::Sequence;
  cfg.head_outputs = 2;
  Romae m(cfg, 5);
  Dataset d = toy_recon(8, 5, 1, 8);
  for (auto& s : d.samples) s.targets = {std::sin(s.values[0]), std::cos(s.values[0])};
  auto idx = iota_idx(8);
  auto b = make_batch(d, idx);
  OptimizerConfig oc;
  auto opt = init_optimizer(oc, m.parameters());
  const double first = finetune_step(m, b, d, idx, Task::SequenceRegression, 1.0, opt, {1e-3}, {});
  double last = first;
  for (int i = 0; i < 30; ++i) last = finetune_step(m, b, d, idx, Task::SequenceRegression, 1.0, opt, {1e-3}, {});
  CHECK(std::isfinite(last));
  CHECK(last < first);
}

TEST_CASE("zero epochs writes the initial checkpoint") {
  Romae m(small_model(true), 6);
  auto before = m.named_parameters();
  Dataset d = toy_recon(8, 6, 1, 9);
  auto cfg = pretrain_cfg();
  cfg.epochs = 0;
  cfg.out_dir = scratch_dir("zero");
  auto r = train_loop(m, d, nullptr, cfg);
  CHECK(r.history.empty());
  CHECK(r.lr_trace.empty());
  auto ck = load_checkpoint(cfg.out_dir / "checkpoint.bin");
  CHECK(ck.epoch == 0);
  CHECK(ck.step == 0);
  REQUIRE(ck.parameters.size() == before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(ck.parameters[i].name == before[i].name);
    CHECK(test::max_abs_diff(ck.parameters[i].tensor.data(), before[i].tensor.data()) == 0.0);
  }
}

TEST_CASE("a run is a pure function of its seed") {
  Dataset d = toy_recon(10, 6, 1, 10), ev = toy_recon(4, 6, 1, 11);
  auto run = [&](const std::string& dir, std::uint64_t seed) {
    Romae m(small_model(true), 7);
    auto cfg = pretrain_cfg();
    cfg.seed = seed;
    cfg.out_dir = scratch_dir(dir);
    auto r = train_loop(m, d, &ev, cfg);
    return std::make_pair(r, slurp(cfg.out_dir / "metrics.csv"));
  };
  auto [a, csv_a] = run("det_a", 1);
  auto [b, csv_b] = run("det_b", 1);
  auto [c, csv_c] = run("det_c", 2);
  CHECK(csv_a == csv_b);
  CHECK(csv_a != csv_c);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].train_loss == b.history[i].train_loss);

  // 10 samples in batches of 4: 3 steps per epoch, 2 epochs, one header.
  CHECK(a.history.size() == 6);
  CHECK(std::count(csv_a.begin(), csv_a.end(), '\n') == 7);
  CHECK(a.history[2].eval.has_value());
  CHECK(!a.history[1].eval.has_value());
  CHECK(a.history.back().step == 6);
}

TEST_CASE("learning rate trace follows the schedule") {
  Romae m(small_model(false), 8);
  Dataset d = toy_recon(10, 6, 1, 12);
  auto cfg = pretrain_cfg();
  cfg.epochs = 3;
  cfg.warmup_steps = 3;
  auto r = train_loop(m, d, nullptr, cfg);
  REQUIRE(r.lr_trace.size() == 9);
  for (std::size_t s = 0; s < 9; ++s) CHECK(r.lr_trace[s] == cosine_warmup_lr(s, 3, 9, cfg.optimizer.lr));
  for (const auto& h : r.history) CHECK(h.lr == r.lr_trace[h.step - 1]);
}

TEST_CASE("resuming continues the counters and matches an uninterrupted run") {
  Dataset d = toy_recon(10, 6, 1, 13);
  auto cfg = pretrain_cfg();
  cfg.epochs = 3;
  Romae whole(small_model(true), 9);
  auto full = train_loop(whole, d, nullptr, cfg);

  Romae part(small_model(true), 9);
  auto first = cfg;
  first.epochs = 1;
  first.out_dir = scratch_dir("resume");
  train_loop(part, d, nullptr, first);
  auto ck = load_checkpoint(first.out_dir / "checkpoint.bin");
  CHECK(ck.epoch == 1);
  CHECK(ck.step == 3);
  Romae resumed = restore_model(ck);
  auto rest = cfg;
  rest.out_dir = first.out_dir;
  auto tail = train_loop(resumed, d, nullptr, rest, &ck);
  REQUIRE(tail.history.size() == 6);
  CHECK(tail.history.front().step == 4);
  CHECK(tail.history.front().epoch == 2);
  for (std::size_t i = 0; i < 6; ++i) CHECK(tail.history[i].train_loss == full.history[i + 3].train_loss);
  auto csv = slurp(first.out_dir / "metrics.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);
}

TEST_CASE("run config validation lists every problem") {
  RunConfig c;
  c.batch_size = 0;
  c.mask_ratio = 1.5;
  c.eval_metric = Metric::Accuracy;
  try {
    c.validate();
    FAIL("expected failure");
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch size") != std::string::npos);
    CHECK(msg.find("mask ratio") != std::string::npos);
    CHECK(msg.find("accuracy") != std::string::npos);
  }
  auto warm = pretrain_cfg();
  warm.warmup_steps = 100;
  Romae m(small_model(true), 1);
  CHECK_THROWS_AS(train_loop(m, toy_recon(4, 4, 1, 1), nullptr, warm), ContractError);
}

TEST_CASE("metrics") {
  std::vector<double> y{1.0, 2.0, 3.0};
  CHECK(mean_squared_error(y, y) == 0.0);
  std::vector<std::size_t> cls{0, 1, 2, 1};
  CHECK(accuracy(cls, cls) == 1.0);
  CHECK(macro_f1(cls, cls, 3) == 1.0);
  CHECK_THROWS_AS(mean_squared_error(std::vector<double>{}, std::vector<double>{}), ContractError);

  // Hand table. truth: 0 0 0 0 1 1 1 2 2 2 ; pred: 0 0 1 2 1 1 0 2 2 1
  //   class 0: tp 2 fp 1 fn 2 -> F1 4/7
  //   class 1: tp 2 fp 2 fn 1 -> F1 4/7
  //   class 2: tp 2 fp 1 fn 1 -> F1 4/6
  std::vector<std::size_t> truth{0, 0, 0, 0, 1, 1, 1, 2, 2, 2};
  std::vector<std::size_t> pred{0, 0, 1, 2, 1, 1, 0, 2, 2, 1};
  CHECK(macro_f1(pred, truth, 3) == doctest::Approx((4.0 / 7 + 4.0 / 7 + 4.0 / 6) / 3).epsilon(1e-14));
  CHECK(accuracy(pred, truth) == doctest::Approx(0.6));
}

TEST_CASE("a constant predictor at the mean of U(0,50) scores the uniform variance") {
  PositionReconSpec spec;
  spec.n_train = 1;
  spec.seed = 3;
  auto split = gen_position_recon(spec);
  TokenizeOptions to;
  to.target = TargetKind::Time;
  Dataset test = to_dataset(split.test, to);

  auto cfg = small_model(true);
  cfg.with_decoder = false;
  cfg.head = HeadKind::Token;
  cfg.head_outputs = 1;
  Romae m(cfg, 4);
  for (auto& p : m.named_parameters()) {
    if (p.name == "task_head.proj.weight") std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    if (p.name == "task_head.proj.bias") p.tensor.data()[0] = 25.0;
  }
  RunConfig rc;
  rc.phase = Phase::Finetune;
  rc.task = Task::TokenRegression;
  const double mse = evaluate(m, test, Task::TokenRegression, Metric::Mse, rc);
  CHECK(std::abs(mse - 2500.0 / 12.0) / (2500.0 / 12.0) < 0.02);
  CHECK(evaluate(m, test, Task::TokenRegression, Metric::Rmse, rc) == doctest::Approx(std::sqrt(mse)));

  auto errs = token_errors(m, test, 256);
  CHECK(errs.size() == 40000);
  auto buckets = bucket_mse(errs, 0.0, 50.0, 10);
  // (p - 25)^2 is largest at the edges.
  CHECK(buckets.front().mse > 4 * buckets[4].mse);
  CHECK(buckets.back().mse > 4 * buckets[5].mse);
  CHECK_THROWS_AS(evaluate(m, Dataset{}, Task::TokenRegression, Metric::Mse, rc), ContractError);
}

TEST_CASE("evaluation of a reconstruction task uses the observed flags") {
  Romae m(small_model(true), 12);
  Dataset d = toy_recon(5, 6, 1, 14);
  for (auto& s : d.samples) s.observed = {1, 0, 1, 0, 1, 1};
  RunConfig rc;
  rc.mask_source = MaskSource::Observed;
  const double a = evaluate(m, d, Task::Reconstruct, Metric::Mse, rc);
  Dataset moved = d;
  for (auto& s : moved.samples) s.targets[0] += 3.0;  // observed token
  CHECK(evaluate(m, moved, Task::Reconstruct, Metric::Mse, rc) == a);
  for (auto& s : moved.samples) s.targets[1] += 3.0;  // hidden token
  CHECK(evaluate(m, moved, Task::Reconstruct, Metric::Mse, rc) != a);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  Romae m(small_model(true, 1, 2), 13);
  Dataset d = toy_recon(6, 5, 2, 15);
  auto cfg = pretrain_cfg();
  cfg.epochs = 2;
  cfg.out_dir = scratch_dir("ckpt");
  auto r = train_loop(m, d, nullptr, cfg);
  auto ck = load_checkpoint(cfg.out_dir / "checkpoint.bin");
  REQUIRE(ck.optimizer.has_value());
  CHECK(ck.optimizer->step == r.final.optimizer->step);
  CHECK(ck.optimizer->first == r.final.optimizer->first);
  CHECK(ck.optimizer->second == r.final.optimizer->second);
  CHECK(ck.meta["phase"] == "pretrain");
  Romae back = restore_model(ck);
  auto a = m.named_parameters(), b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(test::max_abs_diff(a[i].tensor.data(), b[i].tensor.data()) == 0.0);
  CHECK(model_config_to_json(back.config()) == model_config_to_json(m.config()));

  // Fine-tuning loads the encoder and leaves the new head missing.
  auto fcfg = m.config();
  fcfg.with_decoder = false;
  fcfg.head = HeadKind::Sequence;
  fcfg.head_outputs = 3;
  Romae ft(fcfg, 1);
  auto missing = ft.load_parameters(ck.parameters);
  for (const auto& name : missing) CHECK(name.rfind("task_head.", 0) == 0);
  CHECK(!missing.empty());

  auto broken = ck;
  broken.parameters.pop_back();
  broken.parameters[0].tensor = Tensor::parameter(Shape{1}, {0.0});
  try {
    restore_model(broken);
    FAIL("expected mismatch");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("missing parameter") != std::string::npos);
  }

  const auto bad = cfg.out_dir / "bad.bin";
  std::ofstream(bad) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(bad), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(cfg.out_dir / "nope.bin"), CheckpointError);
  auto bytes = slurp(cfg.out_dir / "checkpoint.bin");
  std::ofstream(cfg.out_dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(cfg.out_dir / "short.bin"), CheckpointError);
}
