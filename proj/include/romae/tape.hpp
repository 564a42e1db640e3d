#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "romae/tensor.hpp"

namespace romae {

/// Ordered record of the differentiable operations executed while the tape is
/// active. Entries are appended in execution order, which is a topological
/// order of the graph; backward() walks them in reverse, visiting each once.
class GradTape {
 public:
  using Backward = std::function<void()>;

  struct Entry {
    std::shared_ptr<detail::TensorImpl> output;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    Backward backward;
  };

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// Registers an op. `backward` reads output->grad and accumulates into the
  /// inputs' grad buffers.
  void record(const Tensor& output, std::vector<Tensor> inputs, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Consumes the tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  void clear();

 private:
  std::vector<Entry> entries_;
};

/// The tape ops record onto, or nullptr when recording is off.
GradTape* active_tape();

/// Installs a tape as the active one for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

/// Turns recording off for the lifetime of the scope (evaluation passes).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* previous_;
};

/// True when an op over `inputs` must be recorded.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

/// Gradient of a scalar loss recorded on `tape` with respect to `params`.
/// Parameter gradients are reset before the pass; the tape is consumed.
std::vector<Tensor> grad(GradTape& tape, const Tensor& loss, const std::vector<Tensor>& params);

}  // namespace romae
