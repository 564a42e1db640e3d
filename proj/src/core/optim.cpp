#include "romae/optim.hpp"

#include <cmath>
#include <numbers>

namespace romae {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::AdamW ? "adamw" : "sgd"; }

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "adamw") return OptimizerKind::AdamW;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected adamw or sgd)");
}

OptimizerState init_optimizer(const OptimizerConfig& config, const std::vector<Tensor>& params) {
  OptimizerState s;
  s.config = config;
  for (const auto& p : params) {
    s.first.emplace_back(p.size(), 0.0);
    if (config.kind == OptimizerKind::AdamW) s.second.emplace_back(p.size(), 0.0);
  }
  return s;
}

namespace {
void check_congruent(const OptimizerState& state, const std::vector<Tensor>& params,
                     const std::vector<Tensor>& grads) {
  if (params.size() != grads.size() || params.size() != state.first.size()) {
    throw ContractError("optimizer: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size() || params[i].size() != state.first[i].size()) {
      throw DimensionError("optimizer: gradient " + to_string(grads[i].shape()) +
                           " does not match parameter " + to_string(params[i].shape()));
    }
  }
}
}  // namespace

void adamw_step(OptimizerState& state, std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                double lr) {
  check_congruent(state, params, grads);
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] -= lr * c.weight_decay * p[j];
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void sgd_momentum_step(OptimizerState& state, std::vector<Tensor>& params,
                       const std::vector<Tensor>& grads, double lr) {
  check_congruent(state, params, grads);
  const auto& c = state.config;
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto& vel = state.first[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      vel[j] = c.momentum * vel[j] + g[j] + c.weight_decay * p[j];
      p[j] -= lr * vel[j];
    }
  }
}

void optimizer_step(OptimizerState& state, std::vector<Tensor>& params,
                    const std::vector<Tensor>& grads, double lr) {
  if (state.config.kind == OptimizerKind::AdamW) {
    adamw_step(state, params, grads, lr);
  } else {
    sgd_momentum_step(state, params, grads, lr);
  }
}

double cosine_warmup_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps,
                        double base_lr) {
  if (warmup_steps >= total_steps || step > total_steps) {
    throw ContractError("cosine_warmup_lr: need step <= total and warmup < total (step " +
                        std::to_string(step) + ", warmup " + std::to_string(warmup_steps) +
                        ", total " + std::to_string(total_steps) + ")");
  }
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractError("clip_gradients: max_norm must be positive");
  double ss = 0.0;
  for (const auto& g : grads) {
    for (double v : g.data()) ss += v * v;
  }
  const double norm = std::sqrt(ss);
  if (std::isinf(max_norm) || norm <= max_norm) return norm;
  const double factor = max_norm / norm;
  for (auto& g : grads) {
    for (double& v : g.data()) v *= factor;
  }
  return norm;
}

}  // namespace romae
