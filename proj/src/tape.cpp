#include "xraysep/tape.hpp"

#include <sstream>

namespace xraysep {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
Var Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  nodes_.push_back(Node{"leaf", std::move(value), {}, {}, requires_grad});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(std::string_view op, Tensor<T> value,
                    const std::vector<Var>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var in : inputs) {
    if (in.id >= nodes_.size()) {
      throw std::invalid_argument(std::string(op) + ": input not on tape");
    }
    needs = needs || nodes_[in.id].requires_grad;
  }
  if (!value.all_finite()) {
    bool inputs_finite = true;
    for (const Var in : inputs) {
      inputs_finite = inputs_finite && nodes_[in.id].value.all_finite();
    }
    if (inputs_finite) {
      throw NonFiniteError(std::string(op),
                           std::string(op) + ": non-finite output " +
                               shape_to_string(value.shape()) +
                               " from finite inputs");
    }
  }
  if (needs && !backward) {
    throw std::logic_error(std::string(op) + ": missing backward");
  }
  nodes_.push_back(Node{std::string(op), std::move(value), {},
                        needs ? std::move(backward) : BackwardFn{}, needs});
  return Var{nodes_.size() - 1};
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) return Tensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
void Tape<T>::accumulate(Var v, std::span<const T> g) {
  Node& node = nodes_.at(v.id);
  if (!node.requires_grad) return;
  if (g.size() != node.value.size()) {
    throw std::invalid_argument("gradient size mismatch for op " + node.op);
  }
  if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
  T* dst = node.grad.raw();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
void Tape<T>::backward(Var root) {
  if (value(root).size() != 1) {
    throw std::invalid_argument("backward: root is not a scalar");
  }
  backward(root, Tensor<T>(value(root).shape(), T{1}));
}

template <typename T>
void Tape<T>::backward(Var root, const Tensor<T>& seed) {
  if (seed.shape() != value(root).shape()) {
    throw std::invalid_argument("backward: seed shape mismatch");
  }
  for (Node& node : nodes_) node.grad = Tensor<T>();
  accumulate(root, seed.data());
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    if (!fault_op_.empty() && node.op == fault_op_) {
      Tensor<T> scaled = node.grad;
      for (auto& g : scaled.data()) g *= fault_factor_;
      node.backward(*this, scaled);
    } else {
      // Inputs always precede their op, so node.grad is not touched here.
      node.backward(*this, node.grad);
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace xraysep
