#include "xraysep/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "xraysep/losses.hpp"
#include "xraysep/model.hpp"

namespace xraysep {
namespace {

using Inputs = std::vector<Tensor<double>>;
using Build = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

class Harness {
 public:
  explicit Harness(const GradcheckOptions& options)
      : options_(options), rng_(options.seed) {}

  std::mt19937_64& rng() { return rng_; }

  std::size_t pick(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  Tensor<double> random(const Shape& shape, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Tensor<double> t(shape);
    for (auto& v : t.data()) v = normal(rng_);
    return t;
  }

  /// Random values kept at least `margin` away from every listed kink.
  Tensor<double> away_from(const Shape& shape, std::vector<double> kinks,
                           double margin, double scale = 1.0) {
    Tensor<double> t = random(shape, scale);
    for (auto& v : t.data()) {
      for (const double k : kinks) {
        if (std::fabs(v - k) < margin) v = k + (v >= k ? margin : -margin) * 2;
      }
    }
    return t;
  }

  void prepare(Tape<double>& tape) const {
    if (!options_.corrupt_op.empty()) tape.inject_fault(options_.corrupt_op, 1.5);
  }

  /// Largest relative error over the inputs of one random case. The scalar
  /// objective is a fixed random projection of the op output.
  double check(const Inputs& inputs, const Build& build,
               const std::vector<bool>& differentiable) {
    Tensor<double> projection;
    {
      Tape<double> tape;
      prepare(tape);
      std::vector<Var> vars;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        vars.push_back(tape.leaf(inputs[i], differentiable[i]));
      }
      const Var out = build(tape, vars);
      projection = random(tape.value(out).shape());
      tape.backward(out, projection);
      analytic_.clear();
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        analytic_.push_back(tape.grad(vars[i]));
      }
    }
    const auto objective = [&](const Inputs& in) {
      Tape<double> tape;
      std::vector<Var> vars;
      for (const auto& t : in) vars.push_back(tape.leaf(t));
      const Tensor<double>& out = tape.value(build(tape, vars));
      double acc = 0;
      for (std::size_t k = 0; k < out.size(); ++k) acc += out[k] * projection[k];
      return acc;
    };
    double worst = 0;
    Inputs probe = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!differentiable[i]) continue;
      Tensor<double> numeric(inputs[i].shape());
      for (std::size_t k = 0; k < inputs[i].size(); ++k) {
        const double saved = probe[i][k];
        probe[i][k] = saved + options_.step;
        const double plus = objective(probe);
        probe[i][k] = saved - options_.step;
        const double minus = objective(probe);
        probe[i][k] = saved;
        numeric[k] = (plus - minus) / (2 * options_.step);
      }
      worst = std::max(worst, relative_error(analytic_[i], numeric));
    }
    return worst;
  }

  static double relative_error(const Tensor<double>& a, const Tensor<double>& b,
                               double floor = 1e-12) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      diff += (a[k] - b[k]) * (a[k] - b[k]);
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nb), floor});
    return std::sqrt(diff) / denom;
  }

  const GradcheckOptions& options() const { return options_; }

 private:
  GradcheckOptions options_;
  std::mt19937_64 rng_;
  std::vector<Tensor<double>> analytic_;
};

GradcheckResult run_op(Harness& h, const std::string& name,
                       const std::function<double(Harness&, std::size_t)>& one) {
  GradcheckResult r;
  r.name = name;
  r.tolerance = h.options().op_tolerance;
  for (std::size_t c = 0; c < h.options().cases; ++c) {
    r.max_relative_error = std::max(r.max_relative_error, one(h, c));
    ++r.cases;
  }
  r.passed = r.max_relative_error < r.tolerance;
  return r;
}

double conv_case(Harness& h, std::size_t c) {
  Shape in{1, 2, 5, 5};
  Shape k{3, 2, 3, 3};
  int padding = 1;
  if (c > 0) {
    in = {h.pick(1, 2), h.pick(1, 3), h.pick(3, 6), h.pick(3, 6)};
    k = {h.pick(1, 3), in[1], 3, 3};
    padding = c % 3 == 2 ? 0 : 1;
  }
  return h.check({h.random(in), h.random(k), h.random({k[0]})},
                 [padding](Tape<double>& t, const std::vector<Var>& v) {
                   return conv2d(t, v[0], v[1], v[2], 1, padding);
                 },
                 {true, true, true});
}

double batch_norm_case(Harness& h, std::size_t c) {
  const Shape in{h.pick(1, 3), h.pick(1, 3), h.pick(2, 5), h.pick(2, 5)};
  const std::size_t ch = in[1];
  const BnMode mode = c % 2 == 0 ? BnMode::train : BnMode::eval;
  BatchNormState<double> state(ch);
  for (std::size_t i = 0; i < ch; ++i) {
    state.running_mean[i] = h.random({1})[0];
    state.running_var[i] = 0.5 + std::fabs(h.random({1})[0]);
  }
  return h.check({h.random(in, 2.0), h.random({ch}), h.random({ch})},
                 [state, mode](Tape<double>& t, const std::vector<Var>& v) mutable {
                   return batch_norm(t, v[0], v[1], v[2], state, mode);
                 },
                 {true, true, true});
}

template <typename Op>
double unary_case(Harness& h, Op op, std::vector<double> kinks, bool even) {
  Shape in{h.pick(1, 2), h.pick(1, 3), h.pick(1, 3), h.pick(1, 3)};
  if (even) {
    in[2] *= 2;
    in[3] *= 2;
  }
  Tensor<double> x = kinks.empty() ? h.random(in) : h.away_from(in, kinks, 1e-2);
  return h.check({std::move(x)},
                 [op](Tape<double>& t, const std::vector<Var>& v) { return op(t, v[0]); },
                 {true});
}

double binary_case(Harness& h,
                   const std::function<Var(Tape<double>&, Var, Var)>& op) {
  const Shape in{h.pick(1, 3), h.pick(1, 4), h.pick(2, 4), h.pick(2, 4)};
  return h.check({h.random(in), h.random(in)},
                 [op](Tape<double>& t, const std::vector<Var>& v) {
                   return op(t, v[0], v[1]);
                 },
                 {true, true});
}

/// End-to-end loss through the connected auto-encoders on one patch.
GradcheckResult run_graph(Harness& h, const std::string& name,
                          std::size_t patch, BnMode mode) {
  GradcheckResult r;
  r.name = name;
  r.tolerance = h.options().graph_tolerance;
  const std::size_t cases = std::max<std::size_t>(1, h.options().cases / 5);
  for (std::size_t c = 0; c < cases; ++c) {
    ModelConfig config;
    config.width = 4;
    ModelWeights<double> weights =
        init_weights<double>(h.options().seed * 31 + c, config);
    for (auto& b : weights.buffers()) {
      // Non-trivial running statistics so eval-mode BN is not the identity.
      const bool is_var = b.name.ends_with("running_var");
      for (auto& v : b.tensor->data()) {
        v = is_var ? 0.5 + std::fabs(h.random({1})[0]) : 0.3 * h.random({1})[0];
      }
    }
    for (auto& p : weights.parameters()) {
      if (p.name.ends_with("bias") || p.name.ends_with("beta")) {
        for (auto& v : p.tensor->data()) v = 0.1 * h.random({1})[0];
      }
    }
    const auto rand01 = [&](const Shape& s) {
      Tensor<double> t(s);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& v : t.data()) v = u(h.rng());
      return t;
    };
    const Tensor<double> r1 = rand01({1, 3, patch, patch});
    const Tensor<double> r2 = rand01({1, 3, patch, patch});
    const Tensor<double> x = rand01({1, 1, patch, patch});
    const LossWeights lambdas{};

    // The scalar loss plus its activation pattern: which ReLU outputs are
    // zero and which clamp outputs sit on a bound. A probe pair whose
    // patterns differ straddles a kink and is not differentiable there.
    struct Eval {
      double value = 0;
      std::vector<bool> pattern;
    };
    const auto loss = [&](ModelWeights<double>& w,
                          std::vector<Tensor<double>>* grads) {
      Tape<double> tape;
      h.prepare(tape);
      BoundModel<double> bound = bind(tape, w, grads != nullptr);
      const Var a = tape.leaf(r1);
      const Var b = tape.leaf(r2);
      const Var target = tape.leaf(x);
      const GraphOutputs g = forward_graph(tape, bound, a, b, mode);
      const LossTerms<double> terms = loss_total(tape, g, a, b, target, lambdas);
      Eval e;
      e.value = tape.value(terms.total)[0];
      if (grads) {
        tape.backward(terms.total);
        for (const Var p : bound.parameters) grads->push_back(tape.grad(p));
        return e;
      }
      for (std::size_t id = 0; id < tape.size(); ++id) {
        const Var v{id};
        const std::string& op = tape.op_name(v);
        if (op != "relu" && op != "clamp01") continue;
        for (const double y : tape.value(v).data()) {
          e.pattern.push_back(op == "relu" ? y == 0.0 : (y == 0.0 || y == 1.0));
        }
      }
      return e;
    };

    std::vector<Tensor<double>> analytic;
    loss(weights, &analytic);
    double global = 0;
    for (const auto& g : analytic) {
      for (const double v : g.data()) global += v * v;
    }
    // Conv biases feeding a train-mode BN have an exact gradient of zero;
    // relative error against pure round-off is meaningless there.
    const double floor = 1e-6 * std::sqrt(global);
    auto params = weights.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<double>& p = *params[i].tensor;
      Tensor<double> numeric(p.shape());
      Tensor<double> reference = analytic[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double saved = p[k];
        p[k] = saved + h.options().step;
        const Eval plus = loss(weights, nullptr);
        p[k] = saved - h.options().step;
        const Eval minus = loss(weights, nullptr);
        p[k] = saved;
        if (plus.pattern != minus.pattern) {
          ++r.skipped;
          numeric[k] = 0;
          reference[k] = 0;
          continue;
        }
        numeric[k] = (plus.value - minus.value) / (2 * h.options().step);
      }
      r.max_relative_error =
          std::max(r.max_relative_error,
                   Harness::relative_error(reference, numeric, floor));
    }
    ++r.cases;
  }
  r.passed = r.max_relative_error < r.tolerance;
  return r;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options) {
  Harness h(options);
  std::vector<GradcheckResult> out;
  out.push_back(run_op(h, "conv2d", conv_case));
  out.push_back(run_op(h, "batch_norm", batch_norm_case));
  out.push_back(run_op(h, "relu", [](Harness& hh, std::size_t) {
    return unary_case(hh, [](Tape<double>& t, Var v) { return relu(t, v); },
                      {0.0}, false);
  }));
  out.push_back(run_op(h, "avg_pool2", [](Harness& hh, std::size_t) {
    return unary_case(hh, [](Tape<double>& t, Var v) { return avg_pool2(t, v); },
                      {}, true);
  }));
  out.push_back(run_op(h, "upsample2", [](Harness& hh, std::size_t) {
    return unary_case(hh, [](Tape<double>& t, Var v) { return upsample2(t, v); },
                      {}, false);
  }));
  out.push_back(run_op(h, "clamp01", [](Harness& hh, std::size_t) {
    return unary_case(hh, [](Tape<double>& t, Var v) { return clamp01(t, v); },
                      {0.0, 1.0}, false);
  }));
  out.push_back(run_op(h, "concat_batch", [](Harness& hh, std::size_t) {
    const std::size_t c = hh.pick(1, 3), y = hh.pick(2, 4), x = hh.pick(2, 4);
    return hh.check({hh.random({hh.pick(1, 3), c, y, x}),
                     hh.random({hh.pick(1, 3), c, y, x})},
                    [](Tape<double>& t, const std::vector<Var>& v) {
                      return concat_batch(t, {v[0], v[1], v[0]});
                    },
                    {true, true});
  }));
  out.push_back(run_op(h, "slice_batch", [](Harness& hh, std::size_t) {
    const std::size_t n = hh.pick(2, 5);
    const std::size_t begin = hh.pick(0, n - 1);
    const std::size_t count = hh.pick(1, n - begin);
    return hh.check({hh.random({n, hh.pick(1, 3), hh.pick(2, 4), hh.pick(2, 4)})},
                    [begin, count](Tape<double>& t, const std::vector<Var>& v) {
                      return slice_batch(t, v[0], begin, count);
                    },
                    {true});
  }));
  out.push_back(run_op(h, "add", [](Harness& hh, std::size_t) {
    return binary_case(hh, [](Tape<double>& t, Var a, Var b) { return add(t, a, b); });
  }));
  out.push_back(run_op(h, "sub", [](Harness& hh, std::size_t) {
    return binary_case(hh, [](Tape<double>& t, Var a, Var b) { return sub(t, a, b); });
  }));
  out.push_back(run_op(h, "scale", [](Harness& hh, std::size_t) {
    return unary_case(hh, [](Tape<double>& t, Var v) { return scale(t, v, -1.7); },
                      {}, false);
  }));
  out.push_back(run_op(h, "square", [](Harness& hh, std::size_t) {
    return unary_case(hh, [](Tape<double>& t, Var v) { return square(t, v); },
                      {}, false);
  }));
  out.push_back(run_op(h, "frobenius_norm", [](Harness& hh, std::size_t c) {
    if (c % 2 == 0) {
      return unary_case(
          hh, [](Tape<double>& t, Var v) { return frobenius_norm(t, v); }, {}, false);
    }
    return unary_case(
        hh, [](Tape<double>& t, Var v) { return frobenius_norm_per_sample(t, v); },
        {}, false);
  }));
  out.push_back(run_op(h, "squared_norm", [](Harness& hh, std::size_t) {
    return unary_case(
        hh, [](Tape<double>& t, Var v) { return squared_norm_per_sample(t, v); },
        {}, false);
  }));
  out.push_back(run_op(h, "pearson", [](Harness& hh, std::size_t c) {
    if (c % 2 == 0) {
      return binary_case(
          hh, [](Tape<double>& t, Var a, Var b) { return pearson(t, a, b); });
    }
    return binary_case(hh, [](Tape<double>& t, Var a, Var b) {
      return pearson_per_sample(t, a, b);
    });
  }));
  out.push_back(run_op(h, "mean", [](Harness& hh, std::size_t) {
    return unary_case(hh, [](Tape<double>& t, Var v) { return mean(t, v); }, {},
                      false);
  }));
  out.push_back(run_op(h, "weighted_sum", [](Harness& hh, std::size_t) {
    return hh.check({hh.random({1}), hh.random({1}), hh.random({1})},
                    [](Tape<double>& t, const std::vector<Var>& v) {
                      return weighted_sum<double>(t, v, {1.0, 3.0, -0.5});
                    },
                    {true, true, true});
  }));
  out.push_back(run_graph(h, "loss_total", 8, BnMode::eval));
  out.push_back(run_graph(h, "loss_total_train_mode", 16, BnMode::train));
  return out;
}

}  // namespace xraysep
