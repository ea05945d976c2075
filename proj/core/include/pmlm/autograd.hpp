#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "pmlm/tensor.hpp"

namespace pmlm {

enum class DropoutMode { kStandard, kStraightThrough };

std::string_view to_string(DropoutMode mode);
DropoutMode parse_dropout_mode(std::string_view text);

// A named learnable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

using NodeId = std::uint32_t;

template <typename T>
class Tape;

// Lightweight handle to a node recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

template <typename T>
struct TapeNode {
  using BackwardFn = std::function<void(Tape<T>&, const TapeNode<T>&)>;

  std::string_view op;
  std::vector<NodeId> inputs;
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  Parameter<T>* param = nullptr;
  std::vector<std::uint8_t> mask;  // dropout keep-mask, empty for other ops
  BackwardFn backward;
};

// Records operations in creation order; creation order is a valid
// topological order, so backward is a single reverse sweep.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  // Appends an op node. Throws NonFiniteError if `value` has NaN/Inf.
  Var<T> push(std::string_view op, std::vector<NodeId> inputs, Tensor<T> value,
              typename TapeNode<T>::BackwardFn backward, std::vector<std::uint8_t> mask = {});

  // Runs reverse-mode accumulation from a scalar root. Parameter gradients
  // are added into Parameter::grad.
  void backward(Var<T> root);

  const TapeNode<T>& node(NodeId id) const { return nodes_.at(id); }
  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id()].value; }
  bool needs_grad(NodeId id) const { return nodes_[id].requires_grad; }

  // Gradient w.r.t. a node after backward(); zeros if nothing reached it.
  Tensor<T> grad(Var<T> v) const;
  bool has_grad(Var<T> v) const { return nodes_[v.id()].has_grad; }

  // Adds `g` into the gradient of `id`. The first contribution is moved in
  // unchanged, so identity backward rules are exact bit for bit.
  void accumulate(NodeId id, Tensor<T> g);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::vector<TapeNode<T>> nodes_;
  std::string_view running_op_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

namespace debug {

// Test hook: every gradient contribution emitted by the backward rule of
// `op` is scaled by 1.5. An empty name disables the fault. Thread-local.
void set_corrupted_backward(std::string_view op);
std::string_view corrupted_backward();

}  // namespace debug

}  // namespace pmlm
