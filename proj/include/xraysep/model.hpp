#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xraysep/ops.hpp"

namespace xraysep {

/// How the last decoder block ends before the [0,1] clamp.
enum class DecoderHead {
  /// conv -> BN -> ReLU -> upsample -> clamp, identical to the hidden blocks.
  bn_relu,
  /// conv -> upsample -> clamp; the output is not batch-normalized.
  linear,
};

struct ModelConfig {
  std::size_t width = 128;          // encoder/decoder feature maps
  std::size_t baseline_width = 64;  // hidden maps of the 7-layer baseline
  DecoderHead head = DecoderHead::linear;
  BatchNormOptions batch_norm{};
};

template <typename T>
struct ConvLayer {
  Tensor<T> kernels;  // [Cout, Cin, 3, 3]
  Tensor<T> bias;     // [Cout]
};

template <typename T>
struct BnLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> stats;
  bool enabled = true;
};

template <typename T>
struct ConvBlock {
  ConvLayer<T> conv;
  BnLayer<T> bn;
};

/// E_r: three (conv -> BN -> ReLU -> avg_pool2) blocks, RGB in.
template <typename T>
struct EncoderWeights {
  std::array<ConvBlock<T>, 3> blocks;
};

/// D_r (3 output channels) or D_x (1 output channel): three
/// (conv -> BN -> ReLU -> upsample2) blocks followed by a [0,1] clamp.
template <typename T>
struct DecoderWeights {
  std::array<ConvBlock<T>, 3> blocks;
};

/// F of the single-objective baseline: seven shape-preserving convs.
template <typename T>
struct BaselineWeights {
  std::array<ConvLayer<T>, 7> layers;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

/// Learnable parameters of the connected auto-encoders.
template <typename T>
struct ModelWeights {
  ModelConfig config;
  EncoderWeights<T> encoder;
  DecoderWeights<T> rgb_decoder;
  DecoderWeights<T> xray_decoder;

  /// Every learnable tensor, in a fixed order used by the optimizer and
  /// checkpoints.
  std::vector<NamedTensor<T>> parameters();
  /// Running BN statistics (not learnable, but checkpointed).
  std::vector<NamedTensor<T>> buffers();

  template <typename U>
  ModelWeights<U> cast() const;
};

template <typename T>
struct BaselineModel {
  ModelConfig config;
  BaselineWeights<T> network;
  std::vector<NamedTensor<T>> parameters();
};

template <typename T>
ModelWeights<T> init_weights(std::uint64_t seed, const ModelConfig& config = {});

template <typename T>
BaselineModel<T> init_baseline(std::uint64_t seed,
                               const ModelConfig& config = {});

// Tape binding. A bound model holds one tape leaf per parameter tensor, so
// every use of a network on that tape shares the same storage and gradients
// from all uses accumulate into one slot.

template <typename T>
struct BoundBlock {
  Var kernels, bias, gamma, beta;
  BatchNormState<T>* stats = nullptr;
  bool has_bn = true;
};

template <typename T>
struct BoundNetwork {
  std::vector<BoundBlock<T>> blocks;
};

template <typename T>
struct BoundModel {
  BoundNetwork<T> encoder;
  BoundNetwork<T> rgb_decoder;
  BoundNetwork<T> xray_decoder;
  /// Leaves in ModelWeights::parameters() order.
  std::vector<Var> parameters;
  BatchNormOptions bn_options;
};

template <typename T>
BoundModel<T> bind(Tape<T>& tape, ModelWeights<T>& weights,
                   bool requires_grad);

template <typename T>
struct BoundBaseline {
  std::vector<Var> kernels, biases;
  std::vector<Var> parameters;
};

template <typename T>
BoundBaseline<T> bind(Tape<T>& tape, BaselineModel<T>& model,
                      bool requires_grad);

template <typename T>
Var encode(Tape<T>& tape, const BoundModel<T>& model, Var rgb, BnMode mode);

template <typename T>
Var decode_rgb(Tape<T>& tape, const BoundModel<T>& model, Var features,
               BnMode mode);

template <typename T>
Var decode_xray(Tape<T>& tape, const BoundModel<T>& model, Var features,
                BnMode mode);

/// The nine outputs of the connected auto-encoder graph for one batch.
struct GraphOutputs {
  Var r1_hat, r2_hat;  // D_r(f1), D_r(f2)
  Var x1_hat, x2_hat;  // D_x(f1), D_x(f2)
  Var x_hat;           // D_x(f1 + f2)
  Var x_bar;           // x1_hat + x2_hat
  Var f1, f2, f;       // E_r(r1), E_r(r2), f1 + f2
};

template <typename T>
GraphOutputs forward_graph(Tape<T>& tape, const BoundModel<T>& model, Var r1,
                           Var r2, BnMode mode);

struct BaselineOutputs {
  Var x1_hat, x2_hat;
};

template <typename T>
BaselineOutputs baseline_forward(Tape<T>& tape, const BoundBaseline<T>& model,
                                 Var r1, Var r2);

}  // namespace xraysep
