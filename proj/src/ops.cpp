#include "xraysep/ops.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>

namespace xraysep {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

void require(bool cond, const std::string& message) {
  if (!cond) throw std::invalid_argument(message);
}

void require_nchw(const Shape& s, const char* op) {
  require(s.size() == 4, std::string(op) + ": expected NCHW input, got " +
                             shape_to_string(s));
  require(s[0] > 0, std::string(op) + ": empty batch");
}

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel;
  std::size_t out_height, out_width;
  int stride, padding;

  std::size_t col_rows() const { return in_channels * kernel * kernel; }
  std::size_t col_cols() const { return out_height * out_width; }
};

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const auto k = static_cast<long>(g.kernel);
  const auto h_in = static_cast<long>(g.height);
  const auto w_in = static_cast<long>(g.width);
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (long kh = 0; kh < k; ++kh) {
      for (long kw = 0; kw < k; ++kw) {
        T* row = col + ((c * g.kernel + kh) * g.kernel + kw) * cols;
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const long ih = static_cast<long>(oh) * g.stride - g.padding + kh;
          T* dst = row + oh * g.out_width;
          if (ih < 0 || ih >= h_in) {
            std::fill(dst, dst + g.out_width, T{0});
            continue;
          }
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const long iw = static_cast<long>(ow) * g.stride - g.padding + kw;
            dst[ow] = (iw < 0 || iw >= w_in) ? T{0} : plane[ih * w_in + iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  const auto k = static_cast<long>(g.kernel);
  const auto h_in = static_cast<long>(g.height);
  const auto w_in = static_cast<long>(g.width);
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (long kh = 0; kh < k; ++kh) {
      for (long kw = 0; kw < k; ++kw) {
        const T* row = col + ((c * g.kernel + kh) * g.kernel + kw) * cols;
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const long ih = static_cast<long>(oh) * g.stride - g.padding + kh;
          if (ih < 0 || ih >= h_in) continue;
          const T* src = row + oh * g.out_width;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const long iw = static_cast<long>(ow) * g.stride - g.padding + kw;
            if (iw >= 0 && iw < w_in) plane[ih * w_in + iw] += src[ow];
          }
        }
      }
    }
  }
}

std::atomic<bool> g_pearson_warned{false};

void warn_degenerate_pearson() {
  if (!g_pearson_warned.exchange(true)) {
    spdlog::warn("pearson: constant input, correlation defined as 0");
  } else {
    spdlog::debug("pearson: constant input, correlation defined as 0");
  }
}

template <typename T>
Var unary_elementwise(Tape<T>& tape, const char* op, Var input,
                      T (*forward)(T), T (*derivative)(T)) {
  const Tensor<T>& x = tape.value(input);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  return tape.record(op, std::move(out), {input},
                     [input, derivative](Tape<T>& t, const Tensor<T>& up) {
                       const Tensor<T>& xv = t.value(input);
                       std::vector<T> g(up.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] = up[i] * derivative(xv[i]);
                       }
                       t.accumulate(input, g);
                     });
}

std::pair<std::size_t, std::size_t> per_sample_split(const Shape& s,
                                                     const char* op) {
  require(!s.empty() && s[0] > 0, std::string(op) + ": empty input");
  return {s[0], shape_size(s) / s[0]};
}

/// Pearson correlation of one pair of slices plus the gradient scales
/// needed for backward. `degenerate` is set when either slice is constant.
template <typename T>
struct PearsonParts {
  T mean_a = 0, mean_b = 0, s_ab = 0, s_aa = 0, s_bb = 0, r = 0;
  bool degenerate = false;
};

template <typename T>
PearsonParts<T> pearson_parts(const T* a, const T* b, std::size_t n) {
  PearsonParts<T> p;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  p.mean_a = static_cast<T>(ma);
  p.mean_b = static_cast<T>(mb);
  p.s_ab = static_cast<T>(sab);
  p.s_aa = static_cast<T>(saa);
  p.s_bb = static_cast<T>(sbb);
  if (!(saa > 0.0) || !(sbb > 0.0)) {
    p.degenerate = true;
    p.r = 0;
  } else {
    p.r = static_cast<T>(sab / std::sqrt(saa * sbb));
  }
  return p;
}

template <typename T>
void pearson_grad(const T* a, const T* b, std::size_t n,
                  const PearsonParts<T>& p, T upstream, T* ga, T* gb) {
  if (p.degenerate) return;
  const double root = std::sqrt(static_cast<double>(p.s_aa) * p.s_bb);
  const double r = p.r;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - p.mean_a;
    const double db = b[i] - p.mean_b;
    ga[i] += static_cast<T>(upstream * (db / root - r * da / p.s_aa));
    gb[i] += static_cast<T>(upstream * (da / root - r * db / p.s_bb));
  }
}

template <typename T>
Var pearson_groups(Tape<T>& tape, const char* op, Var a, Var b,
                   std::size_t groups, Shape out_shape) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require(av.shape() == bv.shape(), std::string(op) + ": shape mismatch " +
                                        shape_to_string(av.shape()) + " vs " +
                                        shape_to_string(bv.shape()));
  require(!av.empty(), std::string(op) + ": empty input");
  const std::size_t n = av.size() / groups;
  std::vector<PearsonParts<T>> parts(groups);
  Tensor<T> out(std::move(out_shape));
  for (std::size_t g = 0; g < groups; ++g) {
    parts[g] = pearson_parts(av.raw() + g * n, bv.raw() + g * n, n);
    if (parts[g].degenerate) warn_degenerate_pearson();
    out[g] = parts[g].r;
  }
  return tape.record(
      op, std::move(out), {a, b},
      [a, b, n, parts = std::move(parts)](Tape<T>& t, const Tensor<T>& up) {
        const Tensor<T>& av = t.value(a);
        const Tensor<T>& bv = t.value(b);
        std::vector<T> ga(av.size(), T{0});
        std::vector<T> gb(bv.size(), T{0});
        for (std::size_t g = 0; g < parts.size(); ++g) {
          pearson_grad(av.raw() + g * n, bv.raw() + g * n, n, parts[g], up[g],
                       ga.data() + g * n, gb.data() + g * n);
        }
        t.accumulate(a, ga);
        t.accumulate(b, gb);
      });
}

template <typename T>
Var norm_groups(Tape<T>& tape, const char* op, Var input, std::size_t groups,
                Shape out_shape) {
  const Tensor<T>& x = tape.value(input);
  const std::size_t n = x.size() / groups;
  Tensor<T> out(std::move(out_shape));
  for (std::size_t g = 0; g < groups; ++g) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x[g * n + i];
      acc += v * v;
    }
    out[g] = static_cast<T>(std::sqrt(acc));
  }
  Tensor<T> norms = out;
  return tape.record(
      op, std::move(out), {input},
      [input, n, norms = std::move(norms)](Tape<T>& t, const Tensor<T>& up) {
        const Tensor<T>& xv = t.value(input);
        std::vector<T> g(xv.size(), T{0});
        for (std::size_t k = 0; k < norms.size(); ++k) {
          if (norms[k] == T{0}) continue;
          const T s = up[k] / norms[k];
          for (std::size_t i = 0; i < n; ++i) g[k * n + i] = s * xv[k * n + i];
        }
        t.accumulate(input, g);
      });
}

}  // namespace

template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernels, Var bias, int stride,
           int padding) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& w = tape.value(kernels);
  const Tensor<T>& b = tape.value(bias);
  require_nchw(x.shape(), "conv2d");
  require(w.rank() == 4 && w.dim(2) == w.dim(3),
          "conv2d: kernels must be [Cout, Cin, k, k], got " +
              shape_to_string(w.shape()));
  require(w.dim(1) == x.dim(1), "conv2d: input has " +
                                    std::to_string(x.dim(1)) +
                                    " channels, kernels expect " +
                                    std::to_string(w.dim(1)));
  require(b.rank() == 1 && b.dim(0) == w.dim(0),
          "conv2d: bias must be [Cout]");
  require(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");

  ConvGeometry g{};
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel = w.dim(2);
  g.stride = stride;
  g.padding = padding;
  const long span_h = static_cast<long>(g.height) + 2 * padding -
                      static_cast<long>(g.kernel);
  const long span_w = static_cast<long>(g.width) + 2 * padding -
                      static_cast<long>(g.kernel);
  require(span_h >= 0 && span_w >= 0, "conv2d: kernel larger than input");
  require(span_h % stride == 0 && span_w % stride == 0,
          "conv2d: non-integer output dimension");
  g.out_height = static_cast<std::size_t>(span_h / stride + 1);
  g.out_width = static_cast<std::size_t>(span_w / stride + 1);

  Tensor<T> out(Shape{g.batch, g.out_channels, g.out_height, g.out_width});
  AlignedVector<T> col(g.col_rows() * g.col_cols());
  const ConstMatrixMap<T> wmat(w.raw(), g.out_channels, g.col_rows());
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * g.col_cols();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(x.raw() + n * in_stride, g, col.data());
    const ConstMatrixMap<T> cmat(col.data(), g.col_rows(), g.col_cols());
    MatrixMap<T> omat(out.raw() + n * out_stride, g.out_channels, g.col_cols());
    omat.noalias() = wmat * cmat;
    for (std::size_t c = 0; c < g.out_channels; ++c) {
      omat.row(static_cast<Eigen::Index>(c)).array() += b[c];
    }
  }

  return tape.record(
      "conv2d", std::move(out), {input, kernels, bias},
      [input, kernels, bias, g](Tape<T>& t, const Tensor<T>& up) {
        const Tensor<T>& xv = t.value(input);
        const Tensor<T>& wv = t.value(kernels);
        const bool need_x = t.requires_grad(input);
        const bool need_w = t.requires_grad(kernels);
        const std::size_t in_stride = g.in_channels * g.height * g.width;
        const std::size_t out_stride = g.out_channels * g.col_cols();
        const ConstMatrixMap<T> wmat(wv.raw(), g.out_channels, g.col_rows());

        RowMatrix<T> gw = RowMatrix<T>::Zero(
            static_cast<Eigen::Index>(g.out_channels),
            static_cast<Eigen::Index>(g.col_rows()));
        std::vector<T> gb(g.out_channels, T{0});
        std::vector<T> gx(need_x ? xv.size() : 0, T{0});
        AlignedVector<T> col(g.col_rows() * g.col_cols());
        RowMatrix<T> gcol;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const ConstMatrixMap<T> umat(up.raw() + n * out_stride,
                                       g.out_channels, g.col_cols());
          for (std::size_t c = 0; c < g.out_channels; ++c) {
            gb[c] += umat.row(static_cast<Eigen::Index>(c)).sum();
          }
          if (need_w) {
            im2col(xv.raw() + n * in_stride, g, col.data());
            const ConstMatrixMap<T> cmat(col.data(), g.col_rows(),
                                         g.col_cols());
            gw.noalias() += umat * cmat.transpose();
          }
          if (need_x) {
            gcol.noalias() = wmat.transpose() * umat;
            col2im_add(gcol.data(), g, gx.data() + n * in_stride);
          }
        }
        t.accumulate(bias, gb);
        if (need_w) t.accumulate(kernels, std::span<const T>(gw.data(), gw.size()));
        if (need_x) t.accumulate(input, gx);
      });
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var input, Var gamma, Var beta,
               BatchNormState<T>& state, BnMode mode,
               const BatchNormOptions& options) {
  const Tensor<T>& x = tape.value(input);
  require_nchw(x.shape(), "batch_norm");
  const std::size_t batch = x.dim(0);
  const std::size_t channels = x.dim(1);
  const std::size_t plane = x.dim(2) * x.dim(3);
  const std::size_t count = batch * plane;
  const Tensor<T>& gv = tape.value(gamma);
  const Tensor<T>& bv = tape.value(beta);
  require(gv.shape() == Shape{channels} && bv.shape() == Shape{channels},
          "batch_norm: gamma/beta must be [C]");
  require(state.running_mean.shape() == Shape{channels} &&
              state.running_var.shape() == Shape{channels},
          "batch_norm: running statistics must be [C]");
  require(options.eps > 0, "batch_norm: eps must be positive");
  if (mode == BnMode::train) {
    require(count >= 2, "batch_norm: train mode needs >= 2 values per channel");
  }

  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double mu;
    double var;
    if (mode == BnMode::train) {
      double acc = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.raw() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      mu = acc / static_cast<double>(count);
      double sq = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = x.raw() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      state.running_mean[c] = static_cast<T>(
          (1.0 - options.momentum) * state.running_mean[c] +
          options.momentum * mu);
      state.running_var[c] = static_cast<T>(
          (1.0 - options.momentum) * state.running_var[c] +
          options.momentum * unbiased);
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const double istd = 1.0 / std::sqrt(var + options.eps);
    inv_std[c] = static_cast<T>(istd);
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t base = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = static_cast<T>((x[base + i] - mu) * istd);
        xhat[base + i] = h;
        out[base + i] = gv[c] * h + bv[c];
      }
    }
  }

  return tape.record(
      "batch_norm", std::move(out), {input, gamma, beta},
      [input, gamma, beta, mode, batch, channels, plane, count,
       xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& up) {
        const Tensor<T>& gv = t.value(gamma);
        std::vector<T> ggamma(channels, T{0});
        std::vector<T> gbeta(channels, T{0});
        std::vector<T> gx(xhat.size(), T{0});
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_up = 0;
          double sum_up_xhat = 0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t base = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_up += up[base + i];
              sum_up_xhat += static_cast<double>(up[base + i]) * xhat[base + i];
            }
          }
          ggamma[c] = static_cast<T>(sum_up_xhat);
          gbeta[c] = static_cast<T>(sum_up);
          const double k = static_cast<double>(gv[c]) * inv_std[c];
          const double mean_up = sum_up / static_cast<double>(count);
          const double mean_up_xhat = sum_up_xhat / static_cast<double>(count);
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t base = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (mode == BnMode::train) {
                gx[base + i] = static_cast<T>(
                    k * (up[base + i] - mean_up - xhat[base + i] * mean_up_xhat));
              } else {
                gx[base + i] = static_cast<T>(k * up[base + i]);
              }
            }
          }
        }
        t.accumulate(gamma, ggamma);
        t.accumulate(beta, gbeta);
        t.accumulate(input, gx);
      });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  return unary_elementwise<T>(
      tape, "relu", input, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var clamp01(Tape<T>& tape, Var input) {
  return unary_elementwise<T>(
      tape, "clamp01", input,
      [](T v) { return v < T{0} ? T{0} : (v > T{1} ? T{1} : v); },
      [](T v) { return (v > T{0} && v < T{1}) ? T{1} : T{0}; });
}

template <typename T>
Var square(Tape<T>& tape, Var a) {
  const Tensor<T>& x = tape.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * x[i];
  return tape.record("square", std::move(out), {a},
                     [a](Tape<T>& t, const Tensor<T>& up) {
                       const Tensor<T>& xv = t.value(a);
                       std::vector<T> g(xv.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] = T{2} * xv[i] * up[i];
                       }
                       t.accumulate(a, g);
                     });
}

template <typename T>
Var avg_pool2(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  require_nchw(x.shape(), "avg_pool2");
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0,
          "avg_pool2: odd spatial size " + shape_to_string(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.raw() + p * h * w;
    T* dst = out.raw() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const T* tl = src + (2 * i) * w + 2 * j;
        dst[i * ow + j] = (tl[0] + tl[1] + tl[w] + tl[w + 1]) * T{0.25};
      }
    }
  }
  return tape.record(
      "avg_pool2", std::move(out), {input},
      [input, planes, h, w](Tape<T>& t, const Tensor<T>& up) {
        const std::size_t oh = h / 2;
        const std::size_t ow = w / 2;
        std::vector<T> g(planes * h * w);
        for (std::size_t p = 0; p < planes; ++p) {
          const T* src = up.raw() + p * oh * ow;
          T* dst = g.data() + p * h * w;
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
              dst[i * w + j] = src[(i / 2) * ow + j / 2] * T{0.25};
            }
          }
        }
        t.accumulate(input, g);
      });
}

template <typename T>
Var upsample2(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  require_nchw(x.shape(), "upsample2");
  const std::size_t h = x.dim(2);
  const std::size_t w = x.dim(3);
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t oh = 2 * h;
  const std::size_t ow = 2 * w;
  Tensor<T> out(Shape{x.dim(0), x.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.raw() + p * h * w;
    T* dst = out.raw() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        dst[i * ow + j] = src[(i / 2) * w + j / 2];
      }
    }
  }
  return tape.record(
      "upsample2", std::move(out), {input},
      [input, planes, h, w](Tape<T>& t, const Tensor<T>& up) {
        const std::size_t ow = 2 * w;
        std::vector<T> g(planes * h * w, T{0});
        for (std::size_t p = 0; p < planes; ++p) {
          const T* src = up.raw() + p * 4 * h * w;
          T* dst = g.data() + p * h * w;
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
              const T* tl = src + (2 * i) * ow + 2 * j;
              dst[i * w + j] = tl[0] + tl[1] + tl[ow] + tl[ow + 1];
            }
          }
        }
        t.accumulate(input, g);
      });
}

template <typename T>
Var concat_batch(Tape<T>& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_batch: no inputs");
  Shape shape = tape.value(parts[0]).shape();
  if (shape.empty()) throw std::invalid_argument("concat_batch: scalar input");
  std::vector<std::size_t> sizes;
  shape[0] = 0;
  for (const Var v : parts) {
    const Shape& s = tape.value(v).shape();
    if (s.size() != shape.size() ||
        !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw std::invalid_argument("concat_batch: " + shape_to_string(s) +
                                  " does not stack onto " +
                                  shape_to_string(tape.value(parts[0]).shape()));
    }
    shape[0] += s[0];
    sizes.push_back(tape.value(v).size());
  }
  Tensor<T> out(shape);
  std::size_t offset = 0;
  for (const Var v : parts) {
    const Tensor<T>& x = tape.value(v);
    std::copy(x.raw(), x.raw() + x.size(), out.raw() + offset);
    offset += x.size();
  }
  return tape.record("concat_batch", std::move(out), parts,
                     [parts, sizes](Tape<T>& t, const Tensor<T>& up) {
                       std::size_t at = 0;
                       for (std::size_t i = 0; i < parts.size(); ++i) {
                         t.accumulate(parts[i], std::span<const T>(
                                                    up.raw() + at, sizes[i]));
                         at += sizes[i];
                       }
                     });
}

template <typename T>
Var slice_batch(Tape<T>& tape, Var input, std::size_t begin, std::size_t count) {
  const Tensor<T>& x = tape.value(input);
  if (x.rank() == 0 || begin + count > x.dim(0) || count == 0) {
    throw std::invalid_argument("slice_batch: rows [" + std::to_string(begin) +
                                ", " + std::to_string(begin + count) +
                                ") out of " + shape_to_string(x.shape()));
  }
  const std::size_t row = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  Tensor<T> out(shape);
  std::copy(x.raw() + begin * row, x.raw() + (begin + count) * row, out.raw());
  const std::size_t total = x.size();
  return tape.record("slice_batch", std::move(out), {input},
                     [input, begin, row, total](Tape<T>& t, const Tensor<T>& up) {
                       std::vector<T> g(total, T{0});
                       std::copy(up.raw(), up.raw() + up.size(),
                                 g.begin() + static_cast<long>(begin * row));
                       t.accumulate(input, g);
                     });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require(av.shape() == bv.shape(), "add: shape mismatch " +
                                        shape_to_string(av.shape()) + " vs " +
                                        shape_to_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return tape.record("add", std::move(out), {a, b},
                     [a, b](Tape<T>& t, const Tensor<T>& up) {
                       t.accumulate(a, up.data());
                       t.accumulate(b, up.data());
                     });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require(av.shape() == bv.shape(), "sub: shape mismatch " +
                                        shape_to_string(av.shape()) + " vs " +
                                        shape_to_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return tape.record("sub", std::move(out), {a, b},
                     [a, b](Tape<T>& t, const Tensor<T>& up) {
                       t.accumulate(a, up.data());
                       std::vector<T> neg(up.size());
                       for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -up[i];
                       t.accumulate(b, neg);
                     });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  const Tensor<T>& av = tape.value(a);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  return tape.record("scale", std::move(out), {a},
                     [a, factor](Tape<T>& t, const Tensor<T>& up) {
                       std::vector<T> g(up.size());
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] = up[i] * factor;
                       t.accumulate(a, g);
                     });
}

template <typename T>
Var frobenius_norm(Tape<T>& tape, Var input) {
  require(!tape.value(input).empty(), "frobenius_norm: empty input");
  return norm_groups(tape, "frobenius_norm", input, 1, Shape{1});
}

template <typename T>
Var frobenius_norm_per_sample(Tape<T>& tape, Var input) {
  const auto [groups, n] =
      per_sample_split(tape.value(input).shape(), "frobenius_norm");
  return norm_groups(tape, "frobenius_norm", input, groups, Shape{groups});
}

template <typename T>
Var squared_norm_per_sample(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  const auto [groups, n] = per_sample_split(x.shape(), "squared_norm");
  Tensor<T> out(Shape{groups});
  for (std::size_t g = 0; g < groups; ++g) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x[g * n + i];
      acc += v * v;
    }
    out[g] = static_cast<T>(acc);
  }
  return tape.record("squared_norm", std::move(out), {input},
                     [input, n](Tape<T>& t, const Tensor<T>& up) {
                       const Tensor<T>& xv = t.value(input);
                       std::vector<T> g(xv.size());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         g[i] = T{2} * up[i / n] * xv[i];
                       }
                       t.accumulate(input, g);
                     });
}

template <typename T>
Var pearson(Tape<T>& tape, Var a, Var b) {
  return pearson_groups(tape, "pearson", a, b, 1, Shape{1});
}

template <typename T>
Var pearson_per_sample(Tape<T>& tape, Var a, Var b) {
  const auto [groups, n] = per_sample_split(tape.value(a).shape(), "pearson");
  return pearson_groups(tape, "pearson", a, b, groups, Shape{groups});
}

template <typename T>
Var mean(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  require(!x.empty(), "mean: empty input");
  double acc = 0;
  for (const T v : x.data()) acc += v;
  Tensor<T> out(Shape{1}, static_cast<T>(acc / static_cast<double>(x.size())));
  return tape.record("mean", std::move(out), {input},
                     [input](Tape<T>& t, const Tensor<T>& up) {
                       const std::size_t n = t.value(input).size();
                       std::vector<T> g(n, up[0] / static_cast<T>(n));
                       t.accumulate(input, g);
                     });
}

template <typename T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& scalars,
                 const std::vector<T>& weights) {
  require(scalars.size() == weights.size() && !scalars.empty(),
          "weighted_sum: need one weight per scalar");
  double acc = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(tape.value(scalars[i]).size() == 1,
            "weighted_sum: inputs must be scalars");
    acc += static_cast<double>(weights[i]) * tape.value(scalars[i])[0];
  }
  return tape.record("weighted_sum",
                     Tensor<T>(Shape{1}, static_cast<T>(acc)), scalars,
                     [scalars, weights](Tape<T>& t, const Tensor<T>& up) {
                       for (std::size_t i = 0; i < scalars.size(); ++i) {
                         const T g = up[0] * weights[i];
                         t.accumulate(scalars[i], std::span<const T>(&g, 1));
                       }
                     });
}

#define XRAYSEP_INSTANTIATE_OPS(T)                                             \
  template Var conv2d<T>(Tape<T>&, Var, Var, Var, int, int);                   \
  template Var batch_norm<T>(Tape<T>&, Var, Var, Var, BatchNormState<T>&,      \
                             BnMode, const BatchNormOptions&);                 \
  template Var relu<T>(Tape<T>&, Var);                                         \
  template Var clamp01<T>(Tape<T>&, Var);                                      \
  template Var square<T>(Tape<T>&, Var);                                       \
  template Var avg_pool2<T>(Tape<T>&, Var);                                    \
  template Var upsample2<T>(Tape<T>&, Var);                                    \
  template Var concat_batch<T>(Tape<T>&, const std::vector<Var>&);             \
  template Var slice_batch<T>(Tape<T>&, Var, std::size_t, std::size_t);        \
  template Var add<T>(Tape<T>&, Var, Var);                                     \
  template Var sub<T>(Tape<T>&, Var, Var);                                     \
  template Var scale<T>(Tape<T>&, Var, T);                                     \
  template Var frobenius_norm<T>(Tape<T>&, Var);                               \
  template Var frobenius_norm_per_sample<T>(Tape<T>&, Var);                    \
  template Var squared_norm_per_sample<T>(Tape<T>&, Var);                      \
  template Var pearson<T>(Tape<T>&, Var, Var);                                 \
  template Var pearson_per_sample<T>(Tape<T>&, Var, Var);                      \
  template Var mean<T>(Tape<T>&, Var);                                         \
  template Var weighted_sum<T>(Tape<T>&, const std::vector<Var>&,              \
                               const std::vector<T>&);

XRAYSEP_INSTANTIATE_OPS(float)
XRAYSEP_INSTANTIATE_OPS(double)

#undef XRAYSEP_INSTANTIATE_OPS

}  // namespace xraysep
