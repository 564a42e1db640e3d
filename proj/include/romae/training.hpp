#pragma once

// Losses, masking, optimisation loop and metrics.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "romae/checkpoint.hpp"
#include "romae/model.hpp"
#include "romae/optim.hpp"
#include "romae/tokenizer.hpp"

namespace romae {

enum class Phase { Pretrain, Finetune };
enum class Task { Reconstruct, TokenRegression, SequenceRegression, Classification };
enum class MaskSource { Uniform, Observed };
enum class Metric { Mse, Rmse, Accuracy, MacroF1 };

std::string to_string(Phase p);
std::string to_string(Task t);
std::string to_string(MaskSource m);
std::string to_string(Metric m);
Phase parse_phase(const std::string& s);
Task parse_task(const std::string& s);
MaskSource parse_mask_source(const std::string& s);
Metric parse_metric(const std::string& s);

/// One training example in token form.
///   values    [k * n_p]   what the encoder may see
///   positions [k * axes]
///   targets   Reconstruct: [k * n_p] ground truth per token
///             TokenRegression: [k * outputs]; SequenceRegression: [outputs]
///   observed  [k] or empty (everything observed)
struct Sample {
  std::vector<double> values;
  std::vector<double> positions;
  std::vector<double> targets;
  std::vector<unsigned char> observed;
  long label = -1;

  std::size_t tokens(std::size_t patch_size) const { return values.size() / patch_size; }
};

struct Dataset {
  std::size_t patch_size = 1;
  std::size_t axes = 1;
  std::size_t classes = 0;  // classification only
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  void check() const;
};

/// Assembles samples[idx...] into one padded batch.
TokenBatch make_batch(const Dataset& data, std::span<const std::size_t> idx);

/// Hides round(ratio * k_real) real tokens of every sequence, drawn uniformly
/// without replacement. Rounding that would leave a sequence with nothing
/// hidden or nothing visible is pulled back to 1 or k_real - 1.
MaskPlan plan_uniform_mask(const TokenBatch& batch, double ratio, std::uint64_t seed);

/// Hides every real token whose observed flag is 0.
MaskPlan plan_observed_mask(const TokenBatch& batch, const Dataset& data, std::span<const std::size_t> idx);

/// Correct class -> c, every other class -> (1 - c) / n_classes. Not renormalised.
std::vector<double> smooth_labels(std::size_t label, double c, std::size_t n_classes);

/// Mean squared error over every value of every hidden token.
Tensor masked_reconstruction_loss(const Romae& model, const TokenBatch& batch, const MaskPlan& plan,
                                  const Dataset& data, std::span<const std::size_t> idx,
                                  const ForwardContext& ctx);

/// Supervised loss for the non-reconstruction tasks.
Tensor supervised_loss(const Romae& model, const TokenBatch& batch, const Dataset& data,
                       std::span<const std::size_t> idx, Task task, double label_smoothing,
                       const ForwardContext& ctx);

struct StepSettings {
  double lr = 0.0;
  double clip = std::numeric_limits<double>::infinity();
};

/// Backward pass, clipping and one optimizer update. Returns the loss value.
double pretrain_step(Romae& model, const TokenBatch& batch, const MaskPlan& plan, const Dataset& data,
                     std::span<const std::size_t> idx, OptimizerState& opt, const StepSettings& step,
                     const ForwardContext& ctx);
double finetune_step(Romae& model, const TokenBatch& batch, const Dataset& data,
                     std::span<const std::size_t> idx, Task task, double label_smoothing,
                     OptimizerState& opt, const StepSettings& step, const ForwardContext& ctx);

struct RunConfig {
  Phase phase = Phase::Pretrain;
  Task task = Task::Reconstruct;
  OptimizerConfig optimizer;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::size_t warmup_steps = 0;
  double clip = std::numeric_limits<double>::infinity();
  double label_smoothing = 1.0;
  double mask_ratio = 0.75;
  MaskSource mask_source = MaskSource::Uniform;
  std::optional<MaskSource> eval_mask_source;  // unset: same as mask_source
  Metric eval_metric = Metric::Mse;
  std::size_t eval_batch_size = 256;
  std::uint64_t seed = 0;
  std::size_t log_every = 1;
  std::filesystem::path out_dir;  // empty: keep everything in memory

  void validate() const;
};

struct MetricRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps completed
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> eval;
};

struct TrainResult {
  std::vector<MetricRecord> history;  // logged rows, epoch ordered
  std::vector<double> lr_trace;       // lr used at every step of this run
  Checkpoint final;
};

/// Trains for cfg.epochs total epochs. With `resume`, starts after the
/// checkpoint's epoch and step and restores its optimizer state. Writes
/// metrics.csv and checkpoint.bin under cfg.out_dir when it is set.
TrainResult train_loop(Romae& model, const Dataset& train, const Dataset* eval, const RunConfig& cfg,
                       const Checkpoint* resume = nullptr);

double evaluate(const Romae& model, const Dataset& data, Task task, Metric metric,
                const RunConfig& cfg);

/// Per-token (position, squared error) pairs for a token-regression split.
struct TokenError {
  double position = 0.0;
  double squared_error = 0.0;
};
std::vector<TokenError> token_errors(const Romae& model, const Dataset& data, std::size_t batch_size);

struct Bucket {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double mse = 0.0;
};
/// Equal-width buckets over [lo, hi]; empty buckets keep count 0 and mse NaN.
std::vector<Bucket> bucket_mse(const std::vector<TokenError>& errors, double lo, double hi,
                               std::size_t buckets);

double mean_squared_error(std::span<const double> pred, std::span<const double> target);
double accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth);
/// Unweighted mean of per-class F1; classes absent from both vectors are skipped.
double macro_f1(std::span<const std::size_t> pred, std::span<const std::size_t> truth,
                std::size_t classes);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRecord>& rows,
                       Metric metric);

}  // namespace romae
