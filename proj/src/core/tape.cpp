#include "romae/tape.hpp"

namespace romae {
namespace {
thread_local GradTape* g_active_tape = nullptr;
}  // namespace

GradTape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

void GradTape::record(const Tensor& output, std::vector<Tensor> inputs, Backward backward) {
  Entry e;
  e.output = output.impl();
  e.output->requires_grad = true;
  e.output->tape_id = entries_.size();
  e.inputs.reserve(inputs.size());
  for (auto& t : inputs) e.inputs.push_back(t.impl());
  e.backward = std::move(backward);
  entries_.push_back(std::move(e));
}

void GradTape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("grad: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.tape_id() || *loss.tape_id() >= entries_.size() ||
      entries_[*loss.tape_id()].output != loss.impl()) {
    throw ContractError("grad: loss is not on the active tape");
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (std::size_t i = entries_.size(); i-- > 0;) {
    Entry& e = entries_[i];
    if (e.output->grad.empty()) continue;  // no path to the loss
    for (auto& in : e.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    e.backward();
    // Intermediate gradients are dead once propagated.
    e.output->grad.clear();
    e.output->grad.shrink_to_fit();
  }
  clear();
}

void GradTape::clear() {
  for (auto& e : entries_) e.output->tape_id.reset();
  entries_.clear();
}

std::vector<Tensor> grad(GradTape& tape, const Tensor& loss, const std::vector<Tensor>& params) {
  for (const auto& p : params) p.impl()->grad.clear();
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    Tensor g(p.shape(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.data().begin());
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace romae
