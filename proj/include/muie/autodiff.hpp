#pragma once

#include "muie/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace muie {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::function<void(const Tensor<Scalar>&)> backward_fn;

  Tensor<Scalar>& grad_buffer() {
    if (grad.empty() && value.numel() > 0) grad = Tensor<Scalar>(value.shape());
    return grad;
  }
  void accumulate(const Tensor<Scalar>& g) {
    auto& buf = grad_buffer();
    for (std::int64_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
  }
};

/// Handle to a tensor that may participate in gradient recording. Copies share
/// the underlying node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; zeros if nothing reached this tensor.
  Tensor<Scalar> grad() const {
    if (node_->grad.empty()) return Tensor<Scalar>(shape());
    return node_->grad;
  }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& handle() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Operations recorded in execution order, which is a topological order.
template <typename Scalar>
class Tape {
 public:
  void record(std::shared_ptr<Node<Scalar>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  /// Drops every recorded node and with it every saved activation.
  void clear() { nodes_.clear(); }
  const std::vector<std::shared_ptr<Node<Scalar>>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<Node<Scalar>>> nodes_;
};

namespace detail {
template <typename Scalar>
Tape<Scalar>*& active_tape() {
  thread_local Tape<Scalar>* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Routes ops executed on this thread to `tape` for the scope's lifetime.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(detail::active_tape<Scalar>()) {
    detail::active_tape<Scalar>() = &tape;
  }
  ~TapeScope() { detail::active_tape<Scalar>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Wraps a freshly computed value as an op result. The value must be finite.
/// When a tape is active and any input requires grad, the backward closure is
/// recorded; it receives the output gradient and pushes into its inputs.
template <typename Scalar>
Var<Scalar> make_result(const char* op, Tensor<Scalar> value, bool any_input_requires_grad,
                        std::function<void(const Tensor<Scalar>&)> backward_fn) {
  if (!value.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite output");
  Var<Scalar> out(std::move(value));
  Tape<Scalar>* tape = detail::active_tape<Scalar>();
  if (tape != nullptr && any_input_requires_grad) {
    out.node()->requires_grad = true;
    out.node()->backward_fn = std::move(backward_fn);
    tape->record(out.handle());
  }
  return out;
}

/// Reverse replay from `loss`. Gradients accumulate into every flagged
/// tensor reachable from it.
template <typename Scalar>
void backward(Tape<Scalar>& tape, const Var<Scalar>& loss) {
  if (!loss.defined() || loss.value().numel() != 1)
    throw ShapeError("backward: loss must be a single scalar");
  const auto& nodes = tape.nodes();
  std::ptrdiff_t start = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(nodes.size()) - 1; i >= 0; --i)
    if (nodes[static_cast<std::size_t>(i)].get() == loss.node()) {
      start = i;
      break;
    }
  if (start < 0) throw std::invalid_argument("backward: loss was not produced on this tape");
  loss.node()->grad_buffer()[0] += Scalar(1);
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    Node<Scalar>& node = *nodes[static_cast<std::size_t>(i)];
    if (node.grad.empty() || !node.backward_fn) continue;
    node.backward_fn(node.grad);
  }
}

}  // namespace muie
