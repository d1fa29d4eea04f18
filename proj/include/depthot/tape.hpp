#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "depthot/tensor.hpp"

namespace depthot {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradient buffer of one operand; empty when that operand needs no gradient.
using GradSlot = std::span<double>;

/// Recomputes a node's value from its operand values.
using ForwardFn = std::function<Tensor(std::span<const Tensor* const>)>;

/// Accumulates (+=) operand gradients given the gradient of the node's output.
using BackwardFn = std::function<void(std::span<const Tensor* const> inputs, const Tensor& output,
                                      std::span<const double> grad_output,
                                      std::span<const GradSlot> grad_inputs)>;

struct BackwardReport {
  /// Leaves that require a gradient but are not on any path to the loss.
  /// Their gradient is left at zero.
  std::vector<Var> unreached;
  bool all_reached() const { return unreached.empty(); }
};

/// Append-only record of executed operations supporting reverse-mode
/// differentiation and forward replay.
///
/// Nodes are stored in execution order, so operands always precede their
/// users. A tape and its Vars form a single-threaded unit.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an input. Its requires_grad flag decides whether backward
  /// accumulates a gradient into it.
  Var leaf(Tensor value) {
    Node n;
    n.requires_grad = value.requires_grad();
    n.is_leaf = true;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value.set_requires_grad(false))); }
  Var param(Tensor value) { return leaf(std::move(value.set_requires_grad(true))); }

  /// Executes `forward` on the operand values and records the node.
  Var record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
    Node n;
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      check_owned(v);
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    n.forward = std::move(forward);
    n.backward = std::move(backward);
    n.value = evaluate(n);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
  }

  /// Replaces the value of a leaf. Call replay() to propagate.
  void set_value(Var v, Tensor t) {
    check_owned(v);
    Node& n = nodes_[v.id()];
    if (!n.is_leaf) throw std::invalid_argument("set_value on a non-leaf node");
    if (t.shape() != n.value.shape()) detail::shape_fail("set_value", t.shape(), n.value.shape());
    t.set_requires_grad(n.requires_grad);
    n.value = std::move(t);
  }

  /// Recomputes every non-leaf node in recorded order.
  void replay() {
    for (Node& n : nodes_) {
      if (!n.is_leaf) n.value = evaluate(n);
    }
  }

  /// Gradient accumulated into a leaf; zeros when none has been accumulated.
  Tensor grad(Var v) const {
    const Tensor& t = value(v);
    Tensor g(t.shape());
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.data().begin());
    return g;
  }

  void zero_grad() {
    for (Node& n : nodes_) n.value.zero_grad();
  }

  /// Propagates d(loss)/d(node) back to every leaf with requires_grad set.
  /// Gradients are added to what the leaves already hold.
  BackwardReport backward(Var loss) {
    check_owned(loss);
    if (nodes_[loss.id()].value.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       to_string(nodes_[loss.id()].value.shape()));
    }
    std::vector<std::vector<double>> grads(nodes_.size());
    std::vector<char> reached(nodes_.size(), 0);
    grads[loss.id()].assign(1, 1.0);
    reached[loss.id()] = 1;

    std::vector<const Tensor*> operands;
    std::vector<GradSlot> slots;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!reached[i] || !n.requires_grad) continue;
      if (n.is_leaf) {
        n.value.accumulate_grad(grads[i]);
        continue;
      }
      operands.clear();
      slots.clear();
      for (std::size_t in : n.inputs) {
        operands.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (grads[in].empty()) grads[in].assign(nodes_[in].value.size(), 0.0);
          reached[in] = 1;
          slots.emplace_back(grads[in]);
        } else {
          slots.emplace_back();
        }
      }
      n.backward(operands, n.value, grads[i], slots);
      std::vector<double>().swap(grads[i]);
    }

    BackwardReport report;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].is_leaf && nodes_[i].requires_grad && !reached[i]) {
        report.unreached.push_back(Var(this, i));
      }
    }
    return report;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::size_t> inputs;
    Tensor value;
    ForwardFn forward;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Tensor evaluate(const Node& n) const {
    std::vector<const Tensor*> operands;
    operands.reserve(n.inputs.size());
    for (std::size_t in : n.inputs) operands.push_back(&nodes_[in].value);
    return n.forward(operands);
  }

  void check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw std::invalid_argument("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("value() on an empty Var");
  return tape_->value(*this);
}

}  // namespace depthot
