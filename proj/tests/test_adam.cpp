#include <gtest/gtest.h>

#include <cmath>

#include "xraysep/adam.hpp"

namespace xraysep {
namespace {

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor<double> p(Shape{3}, {1, -2, 3});
  const auto before = p;
  AdamState<double> s;
  adam_update(p, Tensor<double>(Shape{3}), s, {});
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> p(Shape{2}, {0.0, 0.0});
  AdamState<double> s;
  AdamOptions o;
  o.lr = 0.01;
  adam_update(p, Tensor<double>(Shape{2}, {0.5, -3.0}), s, o);
  EXPECT_NEAR(p[0], -0.01, 1e-9);
  EXPECT_NEAR(p[1], 0.01, 1e-9);
}

TEST(Adam, MatchesReferenceRecurrence) {
  const double grads[] = {0.3, -1.2, 0.05, 2.0, -0.4};
  Tensor<double> p(Shape{1}, {0.7});
  AdamState<double> s;
  AdamOptions o;
  o.lr = 1e-3;
  double ref = 0.7, m = 0, v = 0;
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1];
    adam_update(p, Tensor<double>(Shape{1}, {g}), s, o);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    ref -= o.lr * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p[0], ref, 1e-12) << "step " << t;
  }
}

TEST(Adam, ConstantGradientConvergesToUnitStep) {
  Tensor<double> p(Shape{1});
  AdamState<double> s;
  AdamOptions o;
  o.lr = 1e-3;
  double last = 0, delta = 0;
  for (int t = 0; t < 5000; ++t) {
    adam_update(p, Tensor<double>(Shape{1}, {0.37}), s, o);
    delta = last - p[0];
    last = p[0];
  }
  EXPECT_NEAR(delta, o.lr, 1e-3 * o.lr);
}

TEST(Adam, IdenticalStatesUpdateIdentically) {
  Tensor<float> a(Shape{4}, {1, 2, 3, 4}), b = a;
  AdamState<float> sa, sb;
  const Tensor<float> g(Shape{4}, {0.1f, -0.2f, 0.3f, 0.0f});
  for (int i = 0; i < 10; ++i) {
    adam_update(a, g, sa, {});
    adam_update(b, g, sb, {});
  }
  EXPECT_EQ(a, b);
}

TEST(Adam, ShapeMismatchThrows) {
  Tensor<float> p(Shape{2});
  AdamState<float> s;
  EXPECT_THROW(adam_update(p, Tensor<float>(Shape{3}), s, {}),
               std::invalid_argument);
}

}  // namespace
}  // namespace xraysep
