#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "romae/tensor.hpp"

namespace romae {

enum class OptimizerKind { AdamW, Sgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double momentum = 0.9;  // SGD only
};

/// Per-parameter accumulators. For AdamW `first`/`second` are the moment
/// estimates; for SGD `first` is the velocity and `second` is unused.
struct OptimizerState {
  OptimizerConfig config;
  std::size_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
};

OptimizerState init_optimizer(const OptimizerConfig& config, const std::vector<Tensor>& params);

/// Decoupled weight decay followed by the bias-corrected Adam update.
void adamw_step(OptimizerState& state, std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                double lr);

/// v <- momentum * v + (g + wd * p);  p <- p - lr * v.
void sgd_momentum_step(OptimizerState& state, std::vector<Tensor>& params,
                       const std::vector<Tensor>& grads, double lr);

/// Dispatches on state.config.kind.
void optimizer_step(OptimizerState& state, std::vector<Tensor>& params,
                    const std::vector<Tensor>& grads, double lr);

/// Linear warmup from 0 to base_lr over warmup_steps, then a half cosine down
/// to exactly 0 at total_steps.
double cosine_warmup_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps,
                        double base_lr);

/// Rescales all gradients jointly so their global L2 norm is at most max_norm.
/// An infinite threshold disables clipping. Returns the norm before clipping.
double clip_gradients(std::vector<Tensor>& grads, double max_norm);

}  // namespace romae
