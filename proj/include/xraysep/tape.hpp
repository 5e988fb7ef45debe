#pragma once

#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "xraysep/tensor.hpp"

namespace xraysep {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
  bool operator==(const Var&) const = default;
};

/// Raised when a forward op produces NaN/Inf from finite inputs.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string op, const std::string& what)
      : std::runtime_error(what), op_(std::move(op)) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

/// Reverse-mode record of executed ops. Values are immutable once recorded.
/// Gradients of every requires-grad node reachable from the root are
/// populated by backward().
template <typename T>
class Tape {
 public:
  /// Called during backward with the node's upstream gradient. Propagates
  /// into the inputs through accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& upstream)>;

  Var leaf(Tensor<T> value, bool requires_grad = false);

  /// Record the output of an op. `backward` may be empty when no input
  /// requires a gradient.
  Var record(std::string_view op, Tensor<T> value,
             const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated by backward(); zeros when none reached the node.
  Tensor<T> grad(Var v) const;

  /// Add `g` into the gradient slot of `v` (no-op if v needs no grad).
  void accumulate(Var v, std::span<const T> g);

  /// Seed d(root)/d(root) = 1; root must hold a single element.
  void backward(Var root);
  void backward(Var root, const Tensor<T>& seed);

  /// Test hook: scale the upstream gradient handed to every backward of
  /// `op` by `factor`. Used as a negative control for gradient checks.
  void inject_fault(std::string op, T factor) {
    fault_op_ = std::move(op);
    fault_factor_ = factor;
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::string fault_op_;
  T fault_factor_ = T{1};
};

}  // namespace xraysep
