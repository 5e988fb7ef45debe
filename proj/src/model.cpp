#include "xraysep/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace xraysep {
namespace {

template <typename T>
ConvLayer<T> he_conv(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  ConvLayer<T> layer{Tensor<T>(Shape{out, in, 3, 3}), Tensor<T>(Shape{out})};
  const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : layer.kernels.data()) v = static_cast<T>(normal(rng));
  return layer;
}

template <typename T>
BnLayer<T> fresh_bn(std::size_t channels, bool enabled) {
  if (!enabled) return BnLayer<T>{{}, {}, BatchNormState<T>(0), false};
  return BnLayer<T>{Tensor<T>(Shape{channels}, T{1}),
                    Tensor<T>(Shape{channels}, T{0}),
                    BatchNormState<T>(channels), true};
}

template <typename T>
void add_block(std::vector<NamedTensor<T>>& out, const std::string& prefix,
               ConvBlock<T>& block) {
  out.push_back({prefix + ".conv.kernels", &block.conv.kernels});
  out.push_back({prefix + ".conv.bias", &block.conv.bias});
  if (block.bn.enabled) {
    out.push_back({prefix + ".bn.gamma", &block.bn.gamma});
    out.push_back({prefix + ".bn.beta", &block.bn.beta});
  }
}

template <typename T>
void add_stats(std::vector<NamedTensor<T>>& out, const std::string& prefix,
               ConvBlock<T>& block) {
  if (!block.bn.enabled) return;
  out.push_back({prefix + ".bn.running_mean", &block.bn.stats.running_mean});
  out.push_back({prefix + ".bn.running_var", &block.bn.stats.running_var});
}

template <typename T>
BoundNetwork<T> bind_network(Tape<T>& tape, std::array<ConvBlock<T>, 3>& blocks,
                             bool requires_grad, std::vector<Var>& params) {
  BoundNetwork<T> net;
  for (auto& block : blocks) {
    BoundBlock<T> b;
    b.kernels = tape.leaf(block.conv.kernels, requires_grad);
    b.bias = tape.leaf(block.conv.bias, requires_grad);
    params.push_back(b.kernels);
    params.push_back(b.bias);
    b.has_bn = block.bn.enabled;
    if (b.has_bn) {
      b.gamma = tape.leaf(block.bn.gamma, requires_grad);
      b.beta = tape.leaf(block.bn.beta, requires_grad);
      b.stats = &block.bn.stats;
      params.push_back(b.gamma);
      params.push_back(b.beta);
    }
    net.blocks.push_back(b);
  }
  return net;
}

template <typename T>
Var conv_bn_relu(Tape<T>& tape, const BoundBlock<T>& block, Var x,
                 BnMode mode, const BatchNormOptions& options) {
  Var y = conv2d(tape, x, block.kernels, block.bias, 1, 1);
  if (!block.has_bn) return y;
  y = batch_norm(tape, y, block.gamma, block.beta, *block.stats, mode, options);
  return relu(tape, y);
}

template <typename T>
Var run_decoder(Tape<T>& tape, const BoundNetwork<T>& net,
                const BoundModel<T>& model, Var features, BnMode mode,
                std::size_t out_channels, const char* name) {
  const Shape& s = tape.value(features).shape();
  const std::size_t width = tape.value(net.blocks[0].kernels).dim(1);
  if (s.size() != 4 || s[1] != width) {
    throw std::invalid_argument(std::string(name) + ": expected [B," +
                                std::to_string(width) + ",h,w] features, got " +
                                shape_to_string(s));
  }
  Var y = features;
  for (const auto& block : net.blocks) {
    y = conv_bn_relu(tape, block, y, mode, model.bn_options);
    y = upsample2(tape, y);
  }
  if (tape.value(y).dim(1) != out_channels) {
    throw std::logic_error(std::string(name) + ": wrong output channels");
  }
  return clamp01(tape, y);
}

template <typename T, typename U>
Tensor<U> convert(const Tensor<T>& t) {
  return t.template cast<U>();
}

template <typename T, typename U>
ConvBlock<U> convert_block(const ConvBlock<T>& b) {
  ConvBlock<U> out;
  out.conv.kernels = convert<T, U>(b.conv.kernels);
  out.conv.bias = convert<T, U>(b.conv.bias);
  out.bn.gamma = convert<T, U>(b.bn.gamma);
  out.bn.beta = convert<T, U>(b.bn.beta);
  out.bn.stats.running_mean = convert<T, U>(b.bn.stats.running_mean);
  out.bn.stats.running_var = convert<T, U>(b.bn.stats.running_var);
  out.bn.enabled = b.bn.enabled;
  return out;
}

}  // namespace

template <typename T>
std::vector<NamedTensor<T>> ModelWeights<T>::parameters() {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < 3; ++i) {
    add_block(out, "encoder." + std::to_string(i), encoder.blocks[i]);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    add_block(out, "rgb_decoder." + std::to_string(i), rgb_decoder.blocks[i]);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    add_block(out, "xray_decoder." + std::to_string(i), xray_decoder.blocks[i]);
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> ModelWeights<T>::buffers() {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < 3; ++i) {
    add_stats(out, "encoder." + std::to_string(i), encoder.blocks[i]);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    add_stats(out, "rgb_decoder." + std::to_string(i), rgb_decoder.blocks[i]);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    add_stats(out, "xray_decoder." + std::to_string(i), xray_decoder.blocks[i]);
  }
  return out;
}

template <typename T>
template <typename U>
ModelWeights<U> ModelWeights<T>::cast() const {
  ModelWeights<U> out;
  out.config = config;
  for (std::size_t i = 0; i < 3; ++i) {
    out.encoder.blocks[i] = convert_block<T, U>(encoder.blocks[i]);
    out.rgb_decoder.blocks[i] = convert_block<T, U>(rgb_decoder.blocks[i]);
    out.xray_decoder.blocks[i] = convert_block<T, U>(xray_decoder.blocks[i]);
  }
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> BaselineModel<T>::parameters() {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < network.layers.size(); ++i) {
    const std::string prefix = "baseline." + std::to_string(i);
    out.push_back({prefix + ".conv.kernels", &network.layers[i].kernels});
    out.push_back({prefix + ".conv.bias", &network.layers[i].bias});
  }
  return out;
}

template <typename T>
ModelWeights<T> init_weights(std::uint64_t seed, const ModelConfig& config) {
  if (config.width == 0) throw std::invalid_argument("init_weights: width 0");
  std::mt19937_64 rng(seed);
  ModelWeights<T> w;
  w.config = config;
  const std::size_t width = config.width;
  const std::array<std::size_t, 3> enc_in{3, width, width};
  for (std::size_t i = 0; i < 3; ++i) {
    w.encoder.blocks[i] = {he_conv<T>(rng, enc_in[i], width),
                           fresh_bn<T>(width, true)};
  }
  auto make_decoder = [&](DecoderWeights<T>& dec, std::size_t out_channels,
                          T start) {
    for (std::size_t i = 0; i < 3; ++i) {
      const bool last = i == 2;
      const std::size_t out = last ? out_channels : width;
      const bool bn = !last || config.head == DecoderHead::bn_relu;
      dec.blocks[i] = {he_conv<T>(rng, width, out), fresh_bn<T>(out, bn)};
      if (!bn) {
        // Start a linear head inside the clamp's linear region: RGB at
        // mid-grey, X-ray at a quarter so that the summed estimate of two
        // sides starts mid-range.
        for (auto& v : dec.blocks[i].conv.kernels.data()) v *= T(0.1);
        for (auto& v : dec.blocks[i].conv.bias.data()) v = start;
      }
    }
  };
  make_decoder(w.rgb_decoder, 3, T(0.5));
  make_decoder(w.xray_decoder, 1, T(0.25));
  return w;
}

template <typename T>
BaselineModel<T> init_baseline(std::uint64_t seed, const ModelConfig& config) {
  if (config.baseline_width == 0) {
    throw std::invalid_argument("init_baseline: width 0");
  }
  std::mt19937_64 rng(seed);
  BaselineModel<T> m;
  m.config = config;
  const std::size_t width = config.baseline_width;
  for (std::size_t i = 0; i < 7; ++i) {
    const std::size_t in = i == 0 ? 3 : width;
    const std::size_t out = i == 6 ? 1 : width;
    m.network.layers[i] = he_conv<T>(rng, in, out);
  }
  return m;
}

template <typename T>
BoundModel<T> bind(Tape<T>& tape, ModelWeights<T>& weights,
                   bool requires_grad) {
  BoundModel<T> m;
  m.encoder = bind_network(tape, weights.encoder.blocks, requires_grad,
                           m.parameters);
  m.rgb_decoder = bind_network(tape, weights.rgb_decoder.blocks,
                               requires_grad, m.parameters);
  m.xray_decoder = bind_network(tape, weights.xray_decoder.blocks,
                                requires_grad, m.parameters);
  m.bn_options = weights.config.batch_norm;
  return m;
}

template <typename T>
BoundBaseline<T> bind(Tape<T>& tape, BaselineModel<T>& model,
                      bool requires_grad) {
  BoundBaseline<T> b;
  for (auto& layer : model.network.layers) {
    b.kernels.push_back(tape.leaf(layer.kernels, requires_grad));
    b.biases.push_back(tape.leaf(layer.bias, requires_grad));
    b.parameters.push_back(b.kernels.back());
    b.parameters.push_back(b.biases.back());
  }
  return b;
}

template <typename T>
Var encode(Tape<T>& tape, const BoundModel<T>& model, Var rgb, BnMode mode) {
  const Shape& s = tape.value(rgb).shape();
  if (s.size() != 4 || s[1] != 3) {
    throw std::invalid_argument("encode: expected [B,3,H,W], got " +
                                shape_to_string(s));
  }
  if (s[2] % 8 != 0 || s[3] % 8 != 0) {
    throw std::invalid_argument("encode: spatial size " + shape_to_string(s) +
                                " not divisible by 8");
  }
  Var y = rgb;
  for (const auto& block : model.encoder.blocks) {
    y = conv_bn_relu(tape, block, y, mode, model.bn_options);
    y = avg_pool2(tape, y);
  }
  return y;
}

template <typename T>
Var decode_rgb(Tape<T>& tape, const BoundModel<T>& model, Var features,
               BnMode mode) {
  return run_decoder(tape, model.rgb_decoder, model, features, mode, 3,
                     "decode_rgb");
}

template <typename T>
Var decode_xray(Tape<T>& tape, const BoundModel<T>& model, Var features,
                BnMode mode) {
  return run_decoder(tape, model.xray_decoder, model, features, mode, 1,
                     "decode_xray");
}

template <typename T>
GraphOutputs forward_graph(Tape<T>& tape, const BoundModel<T>& model, Var r1,
                           Var r2, BnMode mode) {
  if (tape.value(r1).shape() != tape.value(r2).shape()) {
    throw std::invalid_argument(
        "forward_graph: r1 " + shape_to_string(tape.value(r1).shape()) +
        " and r2 " + shape_to_string(tape.value(r2).shape()) + " differ");
  }
  // Each network runs once over all of its inputs stacked, so batch
  // statistics in training are pooled over everything that network sees and
  // the running statistics used at inference describe that same population.
  const std::size_t n = tape.value(r1).dim(0);
  GraphOutputs out;
  const Var f12 = encode(tape, model, concat_batch(tape, {r1, r2}), mode);
  out.f1 = slice_batch(tape, f12, 0, n);
  out.f2 = slice_batch(tape, f12, n, n);
  out.f = add(tape, out.f1, out.f2);
  const Var r12 = decode_rgb(tape, model, f12, mode);
  out.r1_hat = slice_batch(tape, r12, 0, n);
  out.r2_hat = slice_batch(tape, r12, n, n);
  const Var x12 =
      decode_xray(tape, model, concat_batch(tape, {f12, out.f}), mode);
  out.x1_hat = slice_batch(tape, x12, 0, n);
  out.x2_hat = slice_batch(tape, x12, n, n);
  out.x_hat = slice_batch(tape, x12, 2 * n, n);
  out.x_bar = add(tape, out.x1_hat, out.x2_hat);
  return out;
}

template <typename T>
BaselineOutputs baseline_forward(Tape<T>& tape, const BoundBaseline<T>& model,
                                 Var r1, Var r2) {
  if (tape.value(r1).shape() != tape.value(r2).shape()) {
    throw std::invalid_argument("baseline_forward: r1/r2 shape mismatch");
  }
  auto apply = [&](Var x) {
    for (std::size_t i = 0; i < model.kernels.size(); ++i) {
      x = conv2d(tape, x, model.kernels[i], model.biases[i], 1, 1);
      if (i + 1 < model.kernels.size()) x = relu(tape, x);
    }
    return x;
  };
  return BaselineOutputs{apply(r1), apply(r2)};
}

#define XRAYSEP_INSTANTIATE_MODEL(T)                                           \
  template struct ModelWeights<T>;                                             \
  template struct BaselineModel<T>;                                            \
  template ModelWeights<T> init_weights<T>(std::uint64_t, const ModelConfig&); \
  template BaselineModel<T> init_baseline<T>(std::uint64_t,                    \
                                             const ModelConfig&);              \
  template BoundModel<T> bind<T>(Tape<T>&, ModelWeights<T>&, bool);            \
  template BoundBaseline<T> bind<T>(Tape<T>&, BaselineModel<T>&, bool);        \
  template Var encode<T>(Tape<T>&, const BoundModel<T>&, Var, BnMode);         \
  template Var decode_rgb<T>(Tape<T>&, const BoundModel<T>&, Var, BnMode);     \
  template Var decode_xray<T>(Tape<T>&, const BoundModel<T>&, Var, BnMode);    \
  template GraphOutputs forward_graph<T>(Tape<T>&, const BoundModel<T>&, Var,  \
                                         Var, BnMode);                         \
  template BaselineOutputs baseline_forward<T>(Tape<T>&,                       \
                                               const BoundBaseline<T>&, Var,   \
                                               Var);

XRAYSEP_INSTANTIATE_MODEL(float)
XRAYSEP_INSTANTIATE_MODEL(double)

template ModelWeights<double> ModelWeights<float>::cast<double>() const;
template ModelWeights<float> ModelWeights<double>::cast<float>() const;

#undef XRAYSEP_INSTANTIATE_MODEL

}  // namespace xraysep
