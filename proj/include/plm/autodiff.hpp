#pragma once

#include "plm/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace plm {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool trainable = false;
  bool is_parameter = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  /// Lazily allocated gradient accumulator with the value's shape.
  Tensor<Scalar>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<Scalar>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

/// Handle to a node in the computation graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<Scalar> value) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
  }
  explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  /// A named leaf. Trainable parameters receive gradients and optimizer updates.
  static Var parameter(std::string name, Tensor<Scalar> value, bool trainable = true) {
    Var v(std::move(value));
    v.node_->name = std::move(name);
    v.node_->is_parameter = true;
    v.set_trainable(trainable);
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(Index axis) const { return node_->value.dim(axis); }
  Index rank() const { return node_->value.rank(); }
  const std::string& name() const { return node_->name; }

  bool has_grad() const { return node_->has_grad; }
  const Tensor<Scalar>& grad() const {
    if (!node_->has_grad) node_->grad_buffer();
    return node_->grad;
  }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = Tensor<Scalar>();
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool trainable() const { return node_->trainable; }
  bool is_parameter() const { return node_->is_parameter; }
  void set_trainable(bool on) {
    node_->trainable = on;
    node_->requires_grad = on;
  }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Ordered record of executed operations that require gradients.
template <typename Scalar>
class Tape {
 public:
  void record(std::shared_ptr<Node<Scalar>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<Node<Scalar>>>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and visits recorded nodes once, newest first.
  void backward(const Var<Scalar>& loss);

 private:
  std::vector<std::shared_ptr<Node<Scalar>>> nodes_;
};

template <typename Scalar>
Tape<Scalar>*& active_tape_slot() {
  thread_local Tape<Scalar>* slot = nullptr;
  return slot;
}

template <typename Scalar>
Tape<Scalar>* active_tape() {
  return active_tape_slot<Scalar>();
}

/// Installs a tape as the recording target for the current thread.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape) : previous_(active_tape_slot<Scalar>()) {
    active_tape_slot<Scalar>() = &tape;
  }
  ~TapeScope() { active_tape_slot<Scalar>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& loss) {
  if (loss.value().rank() != 0) {
    throw DimensionError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer().array().setOnes();
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<Scalar>& node = **it;
    if (node.has_grad && node.backward_fn) node.backward_fn(node);
  }
}

/// Backward through the tape active on this thread.
template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  Tape<Scalar>* tape = active_tape<Scalar>();
  if (tape == nullptr) throw std::logic_error("backward called without an active tape");
  tape->backward(loss);
}

/// When enabled, every op checks its output for NaN/Inf and throws NumericError.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

/// Keeps freed tensor memory in the process heap instead of handing large
/// blocks back to the OS, so training steps stop page-faulting fresh buffers.
/// Process-wide; meant for program entry points. No-op outside glibc.
void retain_heap_memory();

/// Forward multiply-add counter fed by matmul and linear kernels (per thread).
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);

}  // namespace plm
