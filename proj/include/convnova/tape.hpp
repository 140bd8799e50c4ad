#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "convnova/tensor.hpp"

namespace convnova {

using NodeId = std::size_t;

enum class OpKind {
  leaf,
  constant,
  conv1d,
  layer_norm,
  gelu,
  sigmoid,
  add,
  hadamard,
  affine,
  mean_pool,
  upsample,
  cross_entropy,
  sum,
};

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  using value_type = T;

  Var() = default;
  Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  NodeId id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
template <typename T>
class Gradients {
 public:
  void set(NodeId id, Tensor<T> g) { grads_.insert_or_assign(id, std::move(g)); }

  bool contains(const Var<T>& v) const { return grads_.count(v.id()) != 0; }

  /// Gradient for `v`; leaves the loss does not depend on get zeros.
  Tensor<T> get(const Var<T>& v) const {
    auto it = grads_.find(v.id());
    if (it != grads_.end()) return it->second;
    return Tensor<T>::zeros_like(v.value());
  }

 private:
  std::unordered_map<NodeId, Tensor<T>> grads_;
};

/// Reverse-mode recording of tensor operations.
///
/// Nodes are appended in evaluation order, so node ids form a topological
/// order and backward() is a single reverse sweep. Node storage is a deque so
/// references to stored values stay valid while the tape grows; backward
/// closures capture pointers to their inputs' values instead of copies.
template <typename T>
class Tape {
 public:
  /// Receives the output gradient and one slot per input. A slot is null when
  /// that input does not need a gradient.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(OpKind::leaf, std::move(value), {}, nullptr, true); }
  Var<T> constant(Tensor<T> value) { return push(OpKind::constant, std::move(value), {}, nullptr, false); }

  Var<T> record(OpKind kind, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool needs = false;
    for (auto id : inputs) needs = needs || nodes_[id].requires_grad;
    return push(kind, std::move(value), std::move(inputs), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradients of `loss` (a one-element tensor) for every tracked leaf.
  Gradients<T> backward(const Var<T>& loss) {
    require(loss.valid() && &loss.tape() == this, "bad_tape", "backward: loss is not on this tape");
    require(loss.value().size() == 1, "non_scalar_loss",
            "backward: loss must be scalar, got shape " + shape_str(loss.value().shape()));
    std::vector<std::optional<Tensor<T>>> grads(nodes_.size());
    grads[loss.id()] = Tensor<T>(loss.value().shape(), T(1));

    Gradients<T> out;
    std::vector<Tensor<T>*> slots;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      if (!grads[id]) continue;
      Node& node = nodes_[id];
      if (node.kind == OpKind::leaf) {
        out.set(id, std::move(*grads[id]));
        grads[id].reset();
        continue;
      }
      if (!node.backward) {
        grads[id].reset();
        continue;
      }
      slots.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const NodeId in = node.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (!grads[in]) grads[in] = Tensor<T>::zeros_like(nodes_[in].value);
        slots[k] = &*grads[in];
      }
      node.backward(*grads[id], slots);
      grads[id].reset();
    }
    return out;
  }

 private:
  struct Node {
    OpKind kind;
    Tensor<T> value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad;
  };

  Var<T> push(OpKind kind, Tensor<T> value, std::vector<NodeId> inputs, BackwardFn backward, bool needs) {
    require(value.all_finite(), "non_finite", "non-finite value produced by operation");
    nodes_.push_back(Node{kind, std::move(value), std::move(inputs), std::move(backward), needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

}  // namespace convnova
