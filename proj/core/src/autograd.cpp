#include "pmlm/autograd.hpp"

#include <string>

namespace pmlm {

namespace {
thread_local std::string g_corrupted_op;
}

namespace debug {
void set_corrupted_backward(std::string_view op) { g_corrupted_op = std::string(op); }
std::string_view corrupted_backward() { return g_corrupted_op; }
}  // namespace debug

std::string_view to_string(DropoutMode mode) {
  return mode == DropoutMode::kStandard ? "standard" : "straight-through";
}

DropoutMode parse_dropout_mode(std::string_view text) {
  if (text == "standard") return DropoutMode::kStandard;
  if (text == "straight-through" || text == "straight_through") return DropoutMode::kStraightThrough;
  throw ConfigError("unknown dropout gradient mode '" + std::string(text) +
                    "' (expected standard|straight-through)");
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  if (!value.all_finite()) throw NonFiniteError("constant", shape_string(value.shape()));
  TapeNode<T> node;
  node.op = "constant";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<T>(this, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (!p.value.all_finite()) throw NonFiniteError("parameter", p.name);
  TapeNode<T> node;
  node.op = "parameter";
  node.value = p.value;
  node.param = &p;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var<T>(this, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::push(std::string_view op, std::vector<NodeId> inputs, Tensor<T> value,
                     typename TapeNode<T>::BackwardFn backward, std::vector<std::uint8_t> mask) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string(op), "output shape " + shape_string(value.shape()));
  }
  TapeNode<T> node;
  node.op = op;
  node.value = std::move(value);
  node.mask = std::move(mask);
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw TapeCorruptionError("op '" + std::string(op) + "' references unknown node");
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>(this, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
void Tape<T>::accumulate(NodeId id, Tensor<T> g) {
  TapeNode<T>& node = nodes_.at(id);
  if (!node.requires_grad) return;
  if (g.shape() != node.value.shape()) {
    throw TapeCorruptionError("gradient shape " + shape_string(g.shape()) + " does not match node shape " +
                              shape_string(node.value.shape()) + " (from '" + std::string(running_op_) + "')");
  }
  if (!g_corrupted_op.empty() && running_op_ == g_corrupted_op) {
    for (T& v : g.data()) v *= T(1.5);
  }
  if (!node.has_grad) {
    node.grad = std::move(g);
    node.has_grad = true;
    return;
  }
  T* dst = node.grad.raw();
  const T* src = g.raw();
  for (std::size_t i = 0, n = g.size(); i < n; ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(Var<T> root) {
  if (root.id() >= nodes_.size()) throw UsageError("backward root is not on this tape");
  if (nodes_[root.id()].value.size() != 1) {
    throw UsageError("backward root must be scalar, got shape " + shape_string(nodes_[root.id()].value.shape()));
  }
  running_op_ = "root";
  accumulate(root.id(), Tensor<T>(nodes_[root.id()].value.shape(), T{1}));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    TapeNode<T>& node = nodes_[i];
    if (!node.has_grad) continue;
    if (node.param != nullptr) {
      Parameter<T>& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
      T* dst = p.grad.raw();
      const T* src = node.grad.raw();
      for (std::size_t k = 0, n = node.grad.size(); k < n; ++k) dst[k] += src[k];
      continue;
    }
    if (node.backward) {
      running_op_ = node.op;
      node.backward(*this, node);
    }
  }
  running_op_ = {};
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const TapeNode<T>& node = nodes_.at(v.id());
  if (node.has_grad) return node.grad;
  return Tensor<T>(node.value.shape());
}

template class Tape<float>;
template class Tape<double>;

}  // namespace pmlm
