#pragma once

#include <vector>

#include "xraysep/tape.hpp"

namespace xraysep {

enum class BnMode { train, eval };

/// Per-channel running statistics of a batch-norm layer.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(Shape{channels}, T{0}),
        running_var(Shape{channels}, T{1}) {}
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

// Layer ops. All image tensors are NCHW.

/// Zero-padded cross-correlation. kernels: [Cout, Cin, k, k], bias: [Cout].
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernels, Var bias, int stride = 1,
           int padding = 1);

/// Batch normalization over (N, H, W) per channel. Train mode normalizes by
/// batch statistics and updates `state`; eval mode reads `state`.
template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta,
               BatchNormState<T>& state, BnMode mode,
               const BatchNormOptions& options = {});

template <typename T>
Var relu(Tape<T>& tape, Var input);

/// Non-overlapping 2x2 mean pooling; H and W must be even.
template <typename T>
Var avg_pool2(Tape<T>& tape, Var input);

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var upsample2(Tape<T>& tape, Var input);

/// min(max(x, 0), 1); gradient 1 strictly inside (0, 1), else 0.
template <typename T>
Var clamp01(Tape<T>& tape, Var input);

/// Stack tensors along the leading (batch) axis; trailing dims must agree.
template <typename T>
Var concat_batch(Tape<T>& tape, const std::vector<Var>& parts);

/// Rows [begin, begin + count) of the leading axis.
template <typename T>
Var slice_batch(Tape<T>& tape, Var input, std::size_t begin, std::size_t count);

// Elementwise arithmetic on equal shapes.

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b);

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor);

template <typename T>
Var square(Tape<T>& tape, Var a);

// Reductions. The *_per_sample variants reduce each leading-axis slice and
// return shape [N].

/// sqrt(sum x^2); gradient x / ||x||, defined as 0 at x = 0.
template <typename T>
Var frobenius_norm(Tape<T>& tape, Var input);

template <typename T>
Var frobenius_norm_per_sample(Tape<T>& tape, Var input);

template <typename T>
Var squared_norm_per_sample(Tape<T>& tape, Var input);

/// Pearson correlation of the vectorized inputs. Returns 0 (and logs a
/// warning) when either input is constant.
template <typename T>
Var pearson(Tape<T>& tape, Var a, Var b);

template <typename T>
Var pearson_per_sample(Tape<T>& tape, Var a, Var b);

/// Mean of all elements, as a 1-element tensor.
template <typename T>
Var mean(Tape<T>& tape, Var input);

/// sum_i weights[i] * scalars[i]; every scalar must hold one element.
template <typename T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& scalars,
                 const std::vector<T>& weights);

}  // namespace xraysep
