#pragma once

#include <cstdint>

#include "xraysep/tensor.hpp"

namespace xraysep {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators for one parameter tensor.
template <typename T>
struct AdamState {
  Tensor<T> first_moment;
  Tensor<T> second_moment;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(const Shape& shape)
      : first_moment(shape), second_moment(shape) {}
};

/// One bias-corrected ADAM step on `param` in place; increments state.step.
template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
                 const AdamOptions& options);

}  // namespace xraysep
