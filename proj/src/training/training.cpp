#include "romae/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "romae/ops.hpp"
#include "romae/tape.hpp"

namespace romae {

namespace {

template <class E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table) {
    if (s == name) return value;
  }
  std::string opts;
  for (const auto& [name, value] : table) opts += std::string(opts.empty() ? "" : ", ") + name;
  throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "' (expected one of: " + opts + ")");
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

// Stream ids for the seeds a run derives. Keeping them apart means resampling
// one never shifts another.
constexpr std::uint64_t kShuffleStream = 0x5100000000ULL;
constexpr std::uint64_t kMaskStream = 0x3A00000000ULL;
constexpr std::uint64_t kDropoutStream = 0xD400000000ULL;
constexpr std::uint64_t kEvalMaskStream = 0xE7A1ULL;

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, kShuffleStream + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

std::size_t real_rows(const TokenBatch& batch) {
  return static_cast<std::size_t>(std::count(batch.pad.begin(), batch.pad.end(), 0));
}

double apply_update(Romae& model, GradTape& tape, const Tensor& loss, OptimizerState& opt,
                    const StepSettings& step) {
  auto params = model.parameters();
  auto grads = grad(tape, loss, params);
  if (std::isfinite(step.clip)) clip_gradients(grads, step.clip);
  optimizer_step(opt, params, grads, step.lr);
  return loss.item();
}

MaskPlan plan_for(const TokenBatch& batch, const Dataset& data, std::span<const std::size_t> idx,
                  const RunConfig& cfg, std::uint64_t seed) {
  if (cfg.mask_source == MaskSource::Observed) return plan_observed_mask(batch, data, idx);
  return plan_uniform_mask(batch, cfg.mask_ratio, seed);
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

std::string to_string(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

std::string to_string(Task t) {
  switch (t) {
    case Task::Reconstruct: return "reconstruct";
    case Task::TokenRegression: return "token_regression";
    case Task::SequenceRegression: return "sequence_regression";
    case Task::Classification: return "classification";
  }
  return "?";
}

std::string to_string(MaskSource m) { return m == MaskSource::Uniform ? "uniform" : "observed"; }

std::string to_string(Metric m) {
  switch (m) {
    case Metric::Mse: return "mse";
    case Metric::Rmse: return "rmse";
    case Metric::Accuracy: return "accuracy";
    case Metric::MacroF1: return "macro_f1";
  }
  return "?";
}

Phase parse_phase(const std::string& s) {
  return parse_enum<Phase>(s, {{"pretrain", Phase::Pretrain}, {"finetune", Phase::Finetune}}, "phase");
}

Task parse_task(const std::string& s) {
  return parse_enum<Task>(s,
                          {{"reconstruct", Task::Reconstruct},
                           {"token_regression", Task::TokenRegression},
                           {"sequence_regression", Task::SequenceRegression},
                           {"classification", Task::Classification}},
                          "task");
}

MaskSource parse_mask_source(const std::string& s) {
  return parse_enum<MaskSource>(s, {{"uniform", MaskSource::Uniform}, {"observed", MaskSource::Observed}},
                                "mask source");
}

Metric parse_metric(const std::string& s) {
  return parse_enum<Metric>(s,
                            {{"mse", Metric::Mse},
                             {"rmse", Metric::Rmse},
                             {"accuracy", Metric::Accuracy},
                             {"macro_f1", Metric::MacroF1}},
                            "metric");
}

void Dataset::check() const {
  if (patch_size == 0 || axes == 0) throw ContractError("dataset: patch size and axes must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string where = "dataset sample " + std::to_string(i);
    if (s.values.empty() || s.values.size() % patch_size != 0) {
      throw DimensionError(where + ": value count is not a positive multiple of the patch size");
    }
    const std::size_t k = s.tokens(patch_size);
    if (s.positions.size() != k * axes) throw DimensionError(where + ": positions do not match the token count");
    if (!s.observed.empty() && s.observed.size() != k) {
      throw DimensionError(where + ": observed flags do not match the token count");
    }
    if (classes > 0 && (s.label < 0 || static_cast<std::size_t>(s.label) >= classes)) {
      throw ContractError(where + ": label out of range");
    }
  }
}

TokenBatch make_batch(const Dataset& data, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ContractError("make_batch: empty batch");
  TokenBatch b;
  b.batch = idx.size();
  b.patch_size = data.patch_size;
  b.axes = data.axes;
  for (auto i : idx) b.tokens = std::max(b.tokens, data.samples.at(i).tokens(data.patch_size));
  b.values.assign(b.batch * b.tokens * b.patch_size, 0.0);
  b.positions.assign(b.batch * b.tokens * b.axes, 0.0);
  b.pad.assign(b.batch * b.tokens, 1);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& s = data.samples[idx[r]];
    const std::size_t k = s.tokens(data.patch_size);
    std::copy(s.values.begin(), s.values.end(), b.values.begin() + r * b.tokens * b.patch_size);
    std::copy(s.positions.begin(), s.positions.end(), b.positions.begin() + r * b.tokens * b.axes);
    std::fill_n(b.pad.begin() + r * b.tokens, k, 0);
  }
  return b;
}

MaskPlan plan_uniform_mask(const TokenBatch& batch, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ContractError("plan_uniform_mask: ratio " + std::to_string(ratio) +
                        " would leave nothing hidden or nothing visible");
  }
  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.masked.assign(batch.batch * batch.tokens, 0);
  Rng rng(seed);
  std::vector<std::size_t> real;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    real.clear();
    for (std::size_t t = 0; t < batch.tokens; ++t) {
      if (!batch.pad[b * batch.tokens + t]) real.push_back(t);
    }
    const std::size_t k = real.size();
    if (k < 2) {
      throw ContractError("plan_uniform_mask: sequence " + std::to_string(b) + " has " + std::to_string(k) +
                          " real tokens; masking needs at least 2");
    }
    const std::size_t n = std::clamp<std::size_t>(round_half_up(ratio * static_cast<double>(k)), 1, k - 1);
    // Partial Fisher-Yates: the first n slots end up a uniform n-subset.
    for (std::size_t i = 0; i < n; ++i) {
      std::swap(real[i], real[i + rng.index(k - i)]);
      plan.masked[b * batch.tokens + real[i]] = 1;
    }
  }
  return plan;
}

MaskPlan plan_observed_mask(const TokenBatch& batch, const Dataset& data, std::span<const std::size_t> idx) {
  MaskPlan plan;
  plan.masked.assign(batch.batch * batch.tokens, 0);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& s = data.samples[idx[b]];
    if (s.observed.empty()) throw ContractError("plan_observed_mask: sample has no observed flags");
    std::size_t hidden = 0;
    for (std::size_t t = 0; t < s.observed.size(); ++t) {
      if (!s.observed[t]) {
        plan.masked[b * batch.tokens + t] = 1;
        ++hidden;
      }
    }
    if (hidden == 0 || hidden == s.observed.size()) {
      throw ContractError("plan_observed_mask: sample " + std::to_string(idx[b]) +
                          " needs at least one observed and one unobserved token");
    }
  }
  const double total = static_cast<double>(real_rows(batch));
  plan.ratio = static_cast<double>(std::count(plan.masked.begin(), plan.masked.end(), 1)) / total;
  return plan;
}

std::vector<double> smooth_labels(std::size_t label, double c, std::size_t n_classes) {
  if (!(c > 0.0 && c <= 1.0)) throw ContractError("smooth_labels: c must lie in (0, 1]");
  if (label >= n_classes) throw ContractError("smooth_labels: label out of range");
  std::vector<double> out(n_classes, (1.0 - c) / static_cast<double>(n_classes));
  out[label] = c;
  return out;
}

Tensor masked_reconstruction_loss(const Romae& model, const TokenBatch& batch, const MaskPlan& plan,
                                  const Dataset& data, std::span<const std::size_t> idx,
                                  const ForwardContext& ctx) {
  const Reconstruction rec = model.reconstruct(batch, plan, ctx);
  const std::size_t np = batch.patch_size, k = batch.tokens;
  std::vector<std::ptrdiff_t> rows;
  std::vector<double> target;
  for (std::size_t r = 0; r < rec.token.size(); ++r) {
    const auto tok = rec.token[r];
    if (tok < 0) continue;
    rows.push_back(static_cast<std::ptrdiff_t>(r));
    const auto& s = data.samples[idx[static_cast<std::size_t>(tok) / k]];
    const std::size_t t = static_cast<std::size_t>(tok) % k;
    if (s.targets.size() != s.values.size()) {
      throw DimensionError("reconstruction targets must have one value per input value");
    }
    target.insert(target.end(), s.targets.begin() + t * np, s.targets.begin() + (t + 1) * np);
  }
  const Tensor flat = reshape(rec.values, Shape{rec.token.size(), np});
  const Tensor picked = gather_rows(flat, rows, Shape{rows.size(), np});
  return mse(picked, Tensor(Shape{rows.size(), np}, std::move(target)));
}

Tensor supervised_loss(const Romae& model, const TokenBatch& batch, const Dataset& data,
                       std::span<const std::size_t> idx, Task task, double label_smoothing,
                       const ForwardContext& ctx) {
  const std::size_t B = batch.batch, k = batch.tokens, out = model.config().head_outputs;
  switch (task) {
    case Task::TokenRegression: {
      const Tensor pred = model.predict_tokens(batch, ctx);
      std::vector<std::ptrdiff_t> rows;
      std::vector<double> target;
      for (std::size_t b = 0; b < B; ++b) {
        const auto& s = data.samples[idx[b]];
        const std::size_t kb = s.tokens(data.patch_size);
        if (s.targets.size() != kb * out) throw DimensionError("token targets must be [tokens, head outputs]");
        for (std::size_t t = 0; t < kb; ++t) rows.push_back(static_cast<std::ptrdiff_t>(b * k + t));
        target.insert(target.end(), s.targets.begin(), s.targets.end());
      }
      const Tensor picked = gather_rows(reshape(pred, Shape{B * k, out}), rows, Shape{rows.size(), out});
      return mse(picked, Tensor(Shape{rows.size(), out}, std::move(target)));
    }
    case Task::SequenceRegression: {
      const Tensor pred = model.predict_sequence(batch, ctx);
      std::vector<double> target;
      for (auto i : idx) {
        const auto& s = data.samples[i];
        if (s.targets.size() != out) throw DimensionError("sequence targets must have one value per head output");
        target.insert(target.end(), s.targets.begin(), s.targets.end());
      }
      return mse(pred, Tensor(Shape{B, out}, std::move(target)));
    }
    case Task::Classification: {
      const Tensor logits = model.predict_sequence(batch, ctx);
      std::vector<double> target;
      for (auto i : idx) {
        const auto t = smooth_labels(static_cast<std::size_t>(data.samples[i].label), label_smoothing, out);
        target.insert(target.end(), t.begin(), t.end());
      }
      return soft_cross_entropy(logits, Tensor(Shape{B, out}, std::move(target)));
    }
    case Task::Reconstruct:
      break;
  }
  throw ContractError("supervised_loss: reconstruction is not a supervised task");
}

double pretrain_step(Romae& model, const TokenBatch& batch, const MaskPlan& plan, const Dataset& data,
                     std::span<const std::size_t> idx, OptimizerState& opt, const StepSettings& step,
                     const ForwardContext& ctx) {
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = masked_reconstruction_loss(model, batch, plan, data, idx, ctx);
  }
  return apply_update(model, tape, loss, opt, step);
}

double finetune_step(Romae& model, const TokenBatch& batch, const Dataset& data,
                     std::span<const std::size_t> idx, Task task, double label_smoothing,
                     OptimizerState& opt, const StepSettings& step, const ForwardContext& ctx) {
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = supervised_loss(model, batch, data, idx, task, label_smoothing, ctx);
  }
  return apply_update(model, tape, loss, opt, step);
}

void RunConfig::validate() const {
  std::vector<std::string> errs;
  if (batch_size == 0) errs.push_back("batch size must be positive");
  if (eval_batch_size == 0) errs.push_back("eval batch size must be positive");
  if (log_every == 0) errs.push_back("log_every must be positive");
  if (!(clip > 0.0)) errs.push_back("clip threshold must be positive (inf disables clipping)");
  if (!(label_smoothing > 0.0 && label_smoothing <= 1.0)) errs.push_back("label smoothing c must lie in (0, 1]");
  if (mask_source == MaskSource::Uniform && !(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    errs.push_back("mask ratio must lie strictly between 0 and 1");
  }
  if (!(optimizer.lr >= 0.0)) errs.push_back("learning rate must be non-negative");
  if ((phase == Phase::Pretrain) != (task == Task::Reconstruct)) {
    errs.push_back("pretraining goes with the reconstruct task and only with it");
  }
  const bool classify_metric = eval_metric == Metric::Accuracy || eval_metric == Metric::MacroF1;
  if (classify_metric != (task == Task::Classification)) {
    errs.push_back("metric " + to_string(eval_metric) + " does not fit task " + to_string(task));
  }
  if (!errs.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ContractError(msg);
  }
}

TrainResult train_loop(Romae& model, const Dataset& train, const Dataset* eval, const RunConfig& cfg,
                       const Checkpoint* resume) {
  cfg.validate();
  train.check();
  if (eval) eval->check();
  if (train.size() == 0 && cfg.epochs > 0) throw ContractError("train_loop: training split is empty");

  auto params = model.parameters();
  OptimizerState opt = init_optimizer(cfg.optimizer, params);
  std::size_t epoch0 = 0, step = 0;
  if (resume) {
    epoch0 = resume->epoch;
    step = resume->step;
    if (resume->optimizer) {
      const auto& st = *resume->optimizer;
      if (st.first.size() != params.size()) {
        throw CheckpointError("resume: optimizer state has " + std::to_string(st.first.size()) +
                              " tensors, model has " + std::to_string(params.size()));
      }
      opt.first = st.first;
      opt.second = st.second;
      opt.step = st.step;
    }
  }

  const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  if (total > 0 && cfg.warmup_steps >= total) {
    throw ContractError("train_loop: " + std::to_string(cfg.warmup_steps) + " warmup steps but only " +
                        std::to_string(total) + " steps in the run");
  }

  std::filesystem::path csv, ckpt_path;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    csv = cfg.out_dir / "metrics.csv";
    ckpt_path = cfg.out_dir / "checkpoint.bin";
    if (!resume || !std::filesystem::exists(csv)) write_metrics_csv(csv, {}, cfg.eval_metric);
  }

  auto snapshot = [&](std::size_t epochs_done) {
    Checkpoint ck = make_checkpoint(model, &opt, epochs_done, step);
    ck.meta = {{"phase", to_string(cfg.phase)}, {"task", to_string(cfg.task)}, {"seed", cfg.seed}};
    if (!ckpt_path.empty()) save_checkpoint(ckpt_path, ck);
    return ck;
  };

  TrainResult result;
  if (epoch0 >= cfg.epochs) {
    result.final = snapshot(epoch0);
    return result;
  }

  for (std::size_t epoch = epoch0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(train.size(), cfg.seed, epoch);
    std::vector<MetricRecord> rows;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + first,
                                             std::min(cfg.batch_size, order.size() - first));
      const TokenBatch batch = make_batch(train, idx);
      const StepSettings settings{cosine_warmup_lr(step, cfg.warmup_steps, total, cfg.optimizer.lr), cfg.clip};
      Rng drop = Rng::derive(cfg.seed, kDropoutStream + step);
      const ForwardContext ctx{true, &drop};
      double loss;
      if (cfg.phase == Phase::Pretrain) {
        const auto plan = plan_for(batch, train, idx, cfg, Rng::derive(cfg.seed, kMaskStream + step).next());
        loss = pretrain_step(model, batch, plan, train, idx, opt, settings, ctx);
      } else {
        loss = finetune_step(model, batch, train, idx, cfg.task, cfg.label_smoothing, opt, settings, ctx);
      }
      if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " +
                                 std::to_string(loss) + ")");
      }
      result.lr_trace.push_back(settings.lr);
      ++step;
      const bool last = first + cfg.batch_size >= order.size();
      if (step % cfg.log_every == 0 || last) rows.push_back({epoch + 1, step, settings.lr, loss, std::nullopt});
    }
    if (eval && eval->size() > 0) rows.back().eval = evaluate(model, *eval, cfg.task, cfg.eval_metric, cfg);
    if (!csv.empty()) write_metrics_csv(csv, rows, cfg.eval_metric);
    result.history.insert(result.history.end(), rows.begin(), rows.end());
    result.final = snapshot(epoch + 1);
  }
  return result;
}

double evaluate(const Romae& model, const Dataset& data, Task task, Metric metric, const RunConfig& cfg) {
  if (data.size() == 0) throw ContractError("evaluate: empty split");
  NoGradScope no_grad;
  const ForwardContext ctx{false, nullptr};
  const std::size_t bs = cfg.eval_batch_size;
  std::vector<double> pred, truth;
  std::vector<std::size_t> pred_cls, true_cls;
  for (std::size_t first = 0; first < data.size(); first += bs) {
    std::vector<std::size_t> idx(std::min(bs, data.size() - first));
    std::iota(idx.begin(), idx.end(), first);
    const TokenBatch batch = make_batch(data, idx);
    if (task == Task::Reconstruct) {
      RunConfig ecfg = cfg;
      ecfg.mask_source = cfg.eval_mask_source.value_or(cfg.mask_source);
      const auto plan = plan_for(batch, data, idx, ecfg, Rng::derive(cfg.seed, kEvalMaskStream + first).next());
      const Reconstruction rec = model.reconstruct(batch, plan, ctx);
      const std::size_t np = batch.patch_size;
      for (std::size_t r = 0; r < rec.token.size(); ++r) {
        if (rec.token[r] < 0) continue;
        const auto tok = static_cast<std::size_t>(rec.token[r]);
        const auto& s = data.samples[idx[tok / batch.tokens]];
        const std::size_t t = tok % batch.tokens;
        for (std::size_t j = 0; j < np; ++j) {
          pred.push_back(rec.values[r * np + j]);
          truth.push_back(s.targets[t * np + j]);
        }
      }
    } else if (task == Task::TokenRegression) {
      const Tensor p = model.predict_tokens(batch, ctx);
      const std::size_t out = model.config().head_outputs;
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& s = data.samples[idx[b]];
        const std::size_t kb = s.tokens(data.patch_size);
        for (std::size_t i = 0; i < kb * out; ++i) pred.push_back(p[b * batch.tokens * out + i]);
        truth.insert(truth.end(), s.targets.begin(), s.targets.end());
      }
    } else {
      const Tensor p = model.predict_sequence(batch, ctx);
      const std::size_t out = model.config().head_outputs;
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& s = data.samples[idx[b]];
        if (task == Task::Classification) {
          pred_cls.push_back(argmax_row(p.data().subspan(b * out, out)));
          true_cls.push_back(static_cast<std::size_t>(s.label));
        } else {
          for (std::size_t i = 0; i < out; ++i) pred.push_back(p[b * out + i]);
          truth.insert(truth.end(), s.targets.begin(), s.targets.end());
        }
      }
    }
  }
  switch (metric) {
    case Metric::Mse: return mean_squared_error(pred, truth);
    case Metric::Rmse: return std::sqrt(mean_squared_error(pred, truth));
    case Metric::Accuracy: return accuracy(pred_cls, true_cls);
    case Metric::MacroF1: return macro_f1(pred_cls, true_cls, model.config().head_outputs);
  }
  return 0.0;
}

std::vector<TokenError> token_errors(const Romae& model, const Dataset& data, std::size_t batch_size) {
  if (model.config().head_outputs != 1) throw ContractError("token_errors: needs a single-output token head");
  NoGradScope no_grad;
  const ForwardContext ctx{false, nullptr};
  std::vector<TokenError> out;
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - first));
    std::iota(idx.begin(), idx.end(), first);
    const TokenBatch batch = make_batch(data, idx);
    const Tensor p = model.predict_tokens(batch, ctx);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& s = data.samples[idx[b]];
      for (std::size_t t = 0; t < s.tokens(data.patch_size); ++t) {
        const double e = p[b * batch.tokens + t] - s.targets[t];
        out.push_back({s.positions[t * data.axes], e * e});
      }
    }
  }
  return out;
}

std::vector<Bucket> bucket_mse(const std::vector<TokenError>& errors, double lo, double hi, std::size_t buckets) {
  if (!(hi > lo) || buckets == 0) throw ContractError("bucket_mse: need hi > lo and at least one bucket");
  std::vector<Bucket> out(buckets);
  const double width = (hi - lo) / static_cast<double>(buckets);
  for (std::size_t i = 0; i < buckets; ++i) {
    out[i].lo = lo + width * static_cast<double>(i);
    out[i].hi = lo + width * static_cast<double>(i + 1);
  }
  for (const auto& e : errors) {
    if (e.position < lo || e.position > hi) continue;
    auto i = static_cast<std::size_t>((e.position - lo) / width);
    i = std::min(i, buckets - 1);
    out[i].count++;
    out[i].mse += e.squared_error;
  }
  for (auto& b : out) b.mse = b.count ? b.mse / static_cast<double>(b.count) : std::nan("");
  return out;
}

double mean_squared_error(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw DimensionError("mean_squared_error: size mismatch");
  if (pred.empty()) throw ContractError("mean_squared_error: nothing to evaluate");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

double accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
  if (pred.size() != truth.size()) throw DimensionError("accuracy: size mismatch");
  if (pred.empty()) throw ContractError("accuracy: nothing to evaluate");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double macro_f1(std::span<const std::size_t> pred, std::span<const std::size_t> truth, std::size_t classes) {
  if (pred.size() != truth.size()) throw DimensionError("macro_f1: size mismatch");
  if (pred.empty()) throw ContractError("macro_f1: nothing to evaluate");
  std::vector<double> tp(classes), fp(classes), fn(classes);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= classes || truth[i] >= classes) throw ContractError("macro_f1: class id out of range");
    if (pred[i] == truth[i]) {
      tp[pred[i]] += 1;
    } else {
      fp[pred[i]] += 1;
      fn[truth[i]] += 1;
    }
  }
  double total = 0.0;
  std::size_t seen = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    total += 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]);
    ++seen;
  }
  return total / static_cast<double>(seen);
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRecord>& rows, Metric metric) {
  // No rows starts a fresh file; otherwise rows are appended.
  const bool header = rows.empty() || !std::filesystem::exists(path);
  std::ofstream out(path, rows.empty() ? std::ios::trunc : std::ios::app);
  if (!out) throw std::runtime_error("cannot write metrics to " + path.string());
  if (header) out << "epoch,step,lr,train_loss,eval_" << to_string(metric) << "\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,", r.epoch, r.step, r.lr, r.train_loss);
    out << buf;
    if (r.eval) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.eval);
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed on " + path.string());
}

}  // namespace romae
