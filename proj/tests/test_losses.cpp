#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "xraysep/losses.hpp"

namespace xraysep {
namespace {

using test::random_tensor;

double value(Tape<double>& tape, Var v) { return tape.value(v)[0]; }

Tensor<double> plus(Tensor<double> t, double c) {
  for (auto& v : t.data()) v += c;
  return t;
}

Tensor<double> times(Tensor<double> t, double c) {
  for (auto& v : t.data()) v *= c;
  return t;
}

TEST(LossL1, ZeroForPerfectReconstruction) {
  Tape<double> tape;
  const auto r1 = random_tensor<double>({2, 3, 8, 8}, 1);
  const auto r2 = random_tensor<double>({2, 3, 8, 8}, 2);
  const Var a = tape.leaf(r1), b = tape.leaf(r2);
  EXPECT_EQ(value(tape, loss_l1(tape, a, a, b, b)), 0.0);
}

TEST(LossL1, ConstantOffsetOnOneSide) {
  Tape<double> tape;
  const double delta = 0.03;
  const auto r1 = random_tensor<double>({1, 3, 64, 64}, 1);
  const auto r2 = random_tensor<double>({1, 3, 64, 64}, 2);
  const Var a = tape.leaf(r1), b = tape.leaf(r2);
  const Var l = loss_l1(tape, a, a, b, tape.leaf(plus(r2, delta)));
  EXPECT_NEAR(value(tape, l), delta * 110.85125168440814, 1e-10);
}

TEST(LossL1, SymmetricInSides) {
  Tape<double> tape;
  Var v[4];
  for (int i = 0; i < 4; ++i) v[i] = tape.leaf(random_tensor<double>({2, 3, 8, 8}, i));
  EXPECT_DOUBLE_EQ(value(tape, loss_l1(tape, v[0], v[1], v[2], v[3])),
                   value(tape, loss_l1(tape, v[2], v[3], v[0], v[1])));
}

TEST(LossL2, OffsetAndSignFlip) {
  Tape<double> tape;
  const auto x = random_tensor<double>({1, 1, 64, 64}, 3);
  const Var xv = tape.leaf(x);
  EXPECT_EQ(value(tape, loss_l2(tape, xv, xv)), 0.0);
  EXPECT_NEAR(value(tape, loss_l2(tape, xv, tape.leaf(plus(x, -0.2)))),
              0.2 * 64, 1e-10);
  const auto y = random_tensor<double>({1, 1, 64, 64}, 4);
  const Var yv = tape.leaf(y);
  EXPECT_DOUBLE_EQ(value(tape, loss_l2(tape, xv, yv)),
                   value(tape, loss_l2(tape, tape.leaf(times(x, -1)),
                                       tape.leaf(times(y, -1)))));
}

TEST(LossL2, AveragesOverBatch) {
  Tape<double> tape;
  Tensor<double> x(Shape{2, 1, 4, 4});
  Tensor<double> xh(Shape{2, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) xh[i] = 1.0;  // entry 0 off by 1
  EXPECT_NEAR(value(tape, loss_l2(tape, tape.leaf(x), tape.leaf(xh))), 4.0 / 2,
              1e-12);
}

TEST(LossL3, DegenerateAndEvenSplitsBothVanish) {
  Tape<double> tape;
  const auto x = random_tensor<double>({1, 1, 8, 8}, 5, 0.0, 1.0);
  const Var xv = tape.leaf(x);
  const Var zero = tape.leaf(Tensor<double>(x.shape()));
  const Var half = tape.leaf(times(x, 0.5));
  EXPECT_EQ(value(tape, loss_l3(tape, xv, add(tape, xv, zero))), 0.0);
  EXPECT_EQ(value(tape, loss_l3(tape, xv, add(tape, half, half))), 0.0);
}

TEST(LossL4, EvenSplitHasLessEnergy) {
  LossVariant raw;
  raw.normalize_energy = false;
  Tape<double> tape;
  const auto x = random_tensor<double>({1, 1, 8, 8}, 6, 0.0, 1.0);
  double xx = 0;
  for (const double v : x.data()) xx += v * v;
  const Var xv = tape.leaf(x);
  const Var zero = tape.leaf(Tensor<double>(x.shape()));
  const Var half = tape.leaf(times(x, 0.5));
  const double degenerate = value(tape, loss_l4(tape, xv, zero, raw));
  const double even = value(tape, loss_l4(tape, half, half, raw));
  EXPECT_NEAR(degenerate, xx, 1e-12);
  EXPECT_NEAR(even, xx / 2, 1e-12);
  EXPECT_EQ(value(tape, loss_l4(tape, zero, zero, raw)), 0.0);
  // normalized by the element count of one patch
  EXPECT_NEAR(value(tape, loss_l4(tape, xv, zero)), xx / 64, 1e-12);
}

TEST(LossL4, HomogeneousOfDegreeTwo) {
  Tape<double> tape;
  const auto a = random_tensor<double>({2, 1, 8, 8}, 7);
  const auto b = random_tensor<double>({2, 1, 8, 8}, 8);
  const double base = value(tape, loss_l4(tape, tape.leaf(a), tape.leaf(b)));
  const double scaled = value(
      tape, loss_l4(tape, tape.leaf(times(a, 3)), tape.leaf(times(b, 3))));
  EXPECT_NEAR(scaled, 9 * base, 1e-10 * scaled);
}

TEST(LossL4, EvenSplitMinimizesForFixedSum) {
  const auto x = random_tensor<double>({1, 1, 8, 8}, 9, 0.0, 1.0);
  Tape<double> tape;
  const Var half = tape.leaf(times(x, 0.5));
  const double best = value(tape, loss_l4(tape, half, half));
  for (const double t : {0.0, 0.1, 0.3, 0.45, 0.55, 0.9, 1.0}) {
    const double l = value(tape, loss_l4(tape, tape.leaf(times(x, t)),
                                         tape.leaf(times(x, 1 - t))));
    EXPECT_GT(l, best);
  }
}

TEST(LossL5, CorrelatedFeaturesGiveOne) {
  Tape<double> tape;
  const auto f = random_tensor<double>({2, 4, 2, 2}, 10);
  const Var fv = tape.leaf(f);
  EXPECT_NEAR(value(tape, loss_l5(tape, fv, fv)), 1.0, 1e-12);
  EXPECT_NEAR(value(tape, loss_l5(tape, fv, tape.leaf(times(f, -1)))), 1.0,
              1e-12);
}

TEST(LossL5, IndependentGaussianMapsNearZero) {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n;
  double sum = 0;
  for (int draw = 0; draw < 100; ++draw) {
    Tensor<double> a(Shape{1, 128, 8, 8}), b(Shape{1, 128, 8, 8});
    for (auto& v : a.data()) v = n(rng);
    for (auto& v : b.data()) v = n(rng);
    Tape<double> tape;
    const double l = value(tape, loss_l5(tape, tape.leaf(a), tape.leaf(b)));
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0);
    sum += l;
  }
  // E[r^2] = 1/(n-1) for n = 8192 under independence.
  EXPECT_LT(sum / 100, 0.01);
}

GraphOutputs leaves(Tape<double>& tape, const Tensor<double>& r1h,
                    const Tensor<double>& r2h, const Tensor<double>& x1h,
                    const Tensor<double>& x2h, const Tensor<double>& xh,
                    const Tensor<double>& f1, const Tensor<double>& f2) {
  GraphOutputs g;
  g.r1_hat = tape.leaf(r1h);
  g.r2_hat = tape.leaf(r2h);
  g.x1_hat = tape.leaf(x1h);
  g.x2_hat = tape.leaf(x2h);
  g.x_hat = tape.leaf(xh);
  g.x_bar = add(tape, g.x1_hat, g.x2_hat);
  g.f1 = tape.leaf(f1);
  g.f2 = tape.leaf(f2);
  g.f = add(tape, g.f1, g.f2);
  return g;
}

TEST(LossTotal, UnitComponentsWithDefaultWeights) {
  // Single-pixel tensors chosen so every component equals 1.
  Tape<double> tape;
  const Shape s{1, 1, 1, 1};
  const Tensor<double> f(Shape{1, 2, 1, 1}, {0.0, 1.0});
  const auto g = leaves(tape, Tensor<double>(s, 0.5), Tensor<double>(s, 0.5),
                        Tensor<double>(s, 1.0), Tensor<double>(s, 0.0),
                        Tensor<double>(s, 1.0), f, f);
  const Var zero = tape.leaf(Tensor<double>(s));
  const auto terms = loss_total(tape, g, zero, zero,
                                tape.leaf(Tensor<double>(s, 2.0)), LossWeights{});
  const auto b = terms.values(tape);
  for (const double c : {b.l1, b.l2, b.l3, b.l4, b.l5}) EXPECT_NEAR(c, 1.0, 1e-12);
  EXPECT_NEAR(b.total, 11.3, 1e-12);
}

TEST(LossTotal, ZeroWeightsLeaveOnlyL1) {
  Tape<double> tape;
  const Shape rgb{2, 3, 8, 8}, gray{2, 1, 8, 8}, feat{2, 4, 2, 2};
  const auto g = leaves(tape, random_tensor<double>(rgb, 1),
                        random_tensor<double>(rgb, 2), random_tensor<double>(gray, 3),
                        random_tensor<double>(gray, 4), random_tensor<double>(gray, 5),
                        random_tensor<double>(feat, 6), random_tensor<double>(feat, 7));
  const auto terms =
      loss_total(tape, g, tape.leaf(random_tensor<double>(rgb, 8)),
                 tape.leaf(random_tensor<double>(rgb, 9)),
                 tape.leaf(random_tensor<double>(gray, 10)), LossWeights{0, 0, 0, 0});
  const auto b = terms.values(tape);
  EXPECT_EQ(b.total, b.l1);
  for (const double c : {b.l1, b.l2, b.l3, b.l4, b.l5}) EXPECT_GE(c, 0.0);

  Tape<double> t2;
  const auto g2 = leaves(t2, random_tensor<double>(rgb, 1),
                         random_tensor<double>(rgb, 2), random_tensor<double>(gray, 3),
                         random_tensor<double>(gray, 4), random_tensor<double>(gray, 5),
                         random_tensor<double>(feat, 6), random_tensor<double>(feat, 7));
  const LossWeights w{1.5, 0.25, 4.0, 0.7};
  const auto b2 = loss_total(t2, g2, t2.leaf(random_tensor<double>(rgb, 8)),
                             t2.leaf(random_tensor<double>(rgb, 9)),
                             t2.leaf(random_tensor<double>(gray, 10)), w)
                      .values(t2);
  const double expected = b2.l1 + w.lambda1 * b2.l2 + w.lambda2 * b2.l3 +
                          w.lambda3 * b2.l4 + w.lambda4 * b2.l5;
  EXPECT_NEAR(b2.total, expected, 1e-12 * expected);
}

TEST(LossTotal, PerfectAutoencodingLeavesOnlyEnergy) {
  Tape<double> tape;
  const auto r1 = random_tensor<double>({1, 3, 8, 8}, 1, 0.0, 1.0);
  const auto r2 = random_tensor<double>({1, 3, 8, 8}, 2, 0.0, 1.0);
  const auto x = random_tensor<double>({1, 1, 8, 8}, 3, 0.0, 1.0);
  // Orthogonal zero-mean features: correlation exactly 0.
  const Tensor<double> f1(Shape{1, 1, 2, 2}, {1, -1, 1, -1});
  const Tensor<double> f2(Shape{1, 1, 2, 2}, {1, 1, -1, -1});
  const auto g = leaves(tape, r1, r2, times(x, 0.5), times(x, 0.5), x, f1, f2);
  const LossWeights w;
  LossVariant raw;
  raw.normalize_energy = false;
  const auto b = loss_total(tape, g, tape.leaf(r1), tape.leaf(r2),
                            tape.leaf(x), w, raw)
                     .values(tape);
  double xx = 0;
  for (const double v : x.data()) xx += v * v;
  EXPECT_EQ(b.l1, 0.0);
  EXPECT_EQ(b.l2, 0.0);
  EXPECT_EQ(b.l3, 0.0);
  EXPECT_EQ(b.l5, 0.0);
  EXPECT_NEAR(b.total, w.lambda3 * xx / 2, 1e-12);
}

TEST(LossTotal, NegativeWeightRejected) {
  EXPECT_THROW((LossWeights{1, -1, 0, 0}.validate()), std::invalid_argument);
}

TEST(LossVariantSquared, SquaresReconstructionNorms) {
  LossVariant sq;
  sq.squared_reconstruction = true;
  Tape<double> tape;
  const auto x = random_tensor<double>({1, 1, 4, 4}, 1);
  const Var l = loss_l2(tape, tape.leaf(x), tape.leaf(plus(x, 0.5)), sq);
  EXPECT_NEAR(value(tape, l), 0.25 * 16, 1e-12);
}

}  // namespace
}  // namespace xraysep
