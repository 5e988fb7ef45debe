#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "test_util.hpp"
#include "xraysep/engine.hpp"
#include "xraysep/image_io.hpp"
#include "xraysep/synthetic.hpp"

namespace xraysep {
namespace {

namespace fs = std::filesystem;

SeparationProblem toy_problem(std::size_t size = 32) {
  SyntheticSpec spec;
  spec.seed = 3;
  spec.size = size;
  const auto scene = generate_scene(spec);
  SeparationProblem p;
  p.r1 = scene.r1;
  p.r2 = scene.r2;
  p.x = mix_images(scene.x1, scene.x2).mixed;
  p.x1_truth = scene.x1;
  p.x2_truth = scene.x2;
  p.patch_size = 16;
  p.overlap = 8;
  return p;
}

TrainConfig toy_config(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.lr = 1e-3;
  c.seed = 5;
  c.model.width = 4;
  c.model.baseline_width = 4;
  c.snapshot_epochs = {1};
  return c;
}

TripleDataset dataset_of(const SeparationProblem& p) {
  return make_dataset(p.r1, p.r2, p.x, p.patch_size, p.overlap);
}

TEST(Train, OneEpochChangesEveryParameter) {
  const auto p = toy_problem();
  const auto data = dataset_of(p);
  auto cfg = toy_config(1);
  auto before = initial_state(cfg);
  auto after = train(data, cfg);
  auto pb = before.weights.parameters(), pa = after.weights.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_NE(*pa[i].tensor, *pb[i].tensor) << pa[i].name;
  }
  ASSERT_EQ(after.history.size(), 1u);
  EXPECT_EQ(after.epochs_done, 1u);
}

TEST(Train, RejectsBadConfig) {
  auto cfg = toy_config(0);
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = toy_config();
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = toy_config();
  cfg.lambdas.lambda2 = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto data = dataset_of(toy_problem());
  const auto a = train(data, toy_config(3));
  const auto b = train(data, toy_config(3));
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.history[e].total, b.history[e].total);
  }
  auto wa = a.weights, wb = b.weights;
  auto pa = wa.parameters(), pb = wb.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].tensor, *pb[i].tensor);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto data = dataset_of(toy_problem());
  const auto full = train(data, toy_config(4));
  const auto path = fs::temp_directory_path() / "xraysep_resume_test.bin";
  auto first = train(data, toy_config(2));
  save_train_state(path, first, toy_config(2));
  auto cfg = toy_config(4);
  auto resumed = load_train_state(path, &cfg);
  EXPECT_EQ(resumed.epochs_done, 2u);
  train(data, cfg, resumed);
  fs::remove(path);
  ASSERT_EQ(resumed.history.size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(resumed.history[e].total, full.history[e].total) << e;
  }
  auto w1 = resumed.weights, w2 = full.weights;
  auto p1 = w1.parameters(), p2 = w2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(*p1[i].tensor, *p2[i].tensor);
}

TEST(Train, ResumeRejectsDifferentSettings) {
  const auto data = dataset_of(toy_problem());
  const auto path = fs::temp_directory_path() / "xraysep_resume_reject.bin";
  save_train_state(path, train(data, toy_config(1)), toy_config(1));
  auto cfg = toy_config(3);
  cfg.seed += 1;
  EXPECT_THROW(load_train_state(path, &cfg), DataError);
  cfg = toy_config(3);
  cfg.lambdas.lambda4 = 0.5;
  EXPECT_THROW(load_train_state(path, &cfg), DataError);
  fs::remove(path);
}

TEST(Train, NonFiniteWeightsAbort) {
  const auto data = dataset_of(toy_problem());
  const auto cfg = toy_config(1);
  auto state = initial_state(cfg);
  state.weights.xray_decoder.blocks[2].conv.bias[0] =
      std::numeric_limits<float>::quiet_NaN();
  try {
    train(data, cfg, state);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.seed(), cfg.seed);
    EXPECT_EQ(e.epoch(), 1u);
  }
}

TEST(Separate, SinglePatchEqualsDecoderOutput) {
  auto problem = toy_problem(16);
  auto w = init_weights<float>(2, toy_config().model);
  const auto s = separate(w, problem.r1, problem.r2, problem.x, 16, 8);
  Tape<float> tape;
  const auto m = bind(tape, w, false);
  const Shape shape{1, 3, 16, 16};
  const auto g = forward_graph(tape, m, tape.leaf(problem.r1.pixels().reshaped(shape)),
                               tape.leaf(problem.r2.pixels().reshaped(shape)),
                               BnMode::eval);
  EXPECT_EQ(s.x1_hat.pixels(), tape.value(g.x1_hat).reshaped({1, 16, 16}));
  EXPECT_EQ(s.x2_hat.pixels(), tape.value(g.x2_hat).reshaped({1, 16, 16}));
}

TEST(Separate, SwappingSidesSwapsOutputs) {
  const auto problem = toy_problem();
  auto w = init_weights<float>(2, toy_config().model);
  const auto a = separate(w, problem.r1, problem.r2, problem.x, 16, 8);
  const auto b = separate(w, problem.r2, problem.r1, problem.x, 16, 8);
  EXPECT_LE(test::max_abs_diff(a.x1_hat.pixels(), b.x2_hat.pixels()), 1e-6);
  EXPECT_LE(test::max_abs_diff(a.x2_hat.pixels(), b.x1_hat.pixels()), 1e-6);
}

TEST(Separate, ErrorMapIsAbsoluteResidual) {
  const auto problem = toy_problem();
  auto w = init_weights<float>(2, toy_config().model);
  const auto s = separate(w, problem.r1, problem.r2, problem.x, 16, 8);
  for (std::size_t i = 0; i < s.x_bar.pixels().size(); ++i) {
    EXPECT_EQ(s.x_bar.pixels()[i], s.x1_hat.pixels()[i] + s.x2_hat.pixels()[i]);
    EXPECT_EQ(s.error_map.pixels()[i],
              std::abs(problem.x.pixels()[i] - s.x_bar.pixels()[i]));
  }
  const auto self = separate(w, problem.r1, problem.r2, s.x_bar, 16, 8);
  for (const float v : self.error_map.pixels().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Separate, RejectsSizeMismatch) {
  const auto problem = toy_problem();
  auto w = init_weights<float>(2, toy_config().model);
  EXPECT_THROW(separate(w, problem.r1, problem.r2, ImagePlane(1, 16, 16), 16, 8),
               DataError);
}

TEST(TrainAndSeparate, SnapshotsAndHistory) {
  const auto problem = toy_problem();
  auto cfg = toy_config(2);
  cfg.snapshot_epochs = {1, 2, 7};
  const auto s = train_and_separate(problem, cfg);
  EXPECT_EQ(s.history.size(), 2u);
  ASSERT_EQ(s.snapshots.size(), 2u);
  EXPECT_TRUE(s.snapshots.count(1));
  EXPECT_TRUE(s.snapshots.at(2).x1_hat == s.x1_hat);
}

TEST(MseEval, ConstantOffsetExample) {
  const ImagePlane x1 = test::random_image(1, 64, 64, 1);
  const ImagePlane x2 = test::random_image(1, 64, 64, 2);
  ImagePlane off = x2;
  for (auto& v : off.pixels().data()) v += 0.1f;
  EXPECT_NEAR(mse_eval({{x1, off}}, x1, x2), 0.05, 1e-6);
  EXPECT_NEAR(mse_eval({{x1, off}, {x1, off}}, x1, x2), 0.05, 1e-6);
  EXPECT_EQ(mse_eval({{x1, x2}}, x1, x2), 0.0);
  EXPECT_NEAR(mse_eval({{x1, off}}, x1, x2, true), 0.5 * 0.1 * 64, 1e-4);
}

TEST(MseEval, SymmetricUnderJointSwap) {
  const auto t1 = test::random_image(1, 8, 8, 1), t2 = test::random_image(1, 8, 8, 2);
  const auto a = test::random_image(1, 8, 8, 3), b = test::random_image(1, 8, 8, 4);
  const auto c = test::random_image(1, 8, 8, 5), d = test::random_image(1, 8, 8, 6);
  EXPECT_DOUBLE_EQ(mse_eval({{a, b}, {c, d}}, t1, t2),
                   mse_eval({{b, a}, {d, c}}, t2, t1));
}

TEST(Outcome, DegenerateAndLeakageCases) {
  const auto x = test::random_image(1, 16, 16, 1);
  EXPECT_EQ(classify_outcome(x, ImagePlane(1, 16, 16), x).label, Outcome::one_sided);
  const auto same = classify_outcome(x, x, x);
  EXPECT_EQ(same.label, Outcome::leakage);
  EXPECT_NEAR(same.correlation, 1.0, 1e-9);
}

TEST(Outcome, IndependentBalancedPairsAreSeparated) {
  std::size_t separated = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto a = test::random_image(1, 32, 32, 2 * s);
    const auto b = test::random_image(1, 32, 32, 2 * s + 1);
    separated += classify_outcome(a, b, a).label == Outcome::separated;
  }
  EXPECT_EQ(separated, 100u);
}

TEST(Outcome, InvariantUnderSideSwap) {
  std::mt19937_64 rng(3);
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto a = test::random_image(1, 16, 16, s);
    auto b = test::random_image(1, 16, 16, s + 100);
    const float mix = (rng() % 100) / 100.0f;
    const float gain = (rng() % 100) / 100.0f;
    for (std::size_t i = 0; i < a.pixels().size(); ++i) {
      b.pixels()[i] = gain * (mix * a.pixels()[i] + (1 - mix) * b.pixels()[i]);
    }
    EXPECT_EQ(classify_outcome(a, b, a).label, classify_outcome(b, a, a).label);
  }
}

TrialRecord record(std::uint64_t seed, Outcome o, double mse) {
  TrialRecord r;
  r.seed = seed;
  r.outcome.label = o;
  r.mse = mse;
  return r;
}

TEST(Trials, AggregateIsOrderIndependent) {
  std::vector<TrialRecord> recs{record(1, Outcome::separated, 0.1),
                                record(2, Outcome::leakage, 0.3),
                                record(3, Outcome::separated, 0.2),
                                record(4, Outcome::one_sided, 0.6)};
  auto rev = recs;
  std::reverse(rev.begin(), rev.end());
  const auto a = aggregate_trials(recs, {});
  const auto b = aggregate_trials(rev, {});
  EXPECT_EQ(a.frequencies, b.frequencies);
  EXPECT_EQ(*a.mean_mse, *b.mean_mse);
  EXPECT_NEAR(*a.mean_mse, 0.3, 1e-12);
  EXPECT_EQ(a.frequencies, (std::array<double, 3>{0.5, 0.25, 0.25}));
  EXPECT_EQ(b.records.front().seed, 1u);
}

TEST(Trials, SingleTrialReport) {
  const auto problem = toy_problem();
  TrialOptions opt;
  opt.jobs = 1;
  const auto r = run_trials(problem, toy_config(1), 1, opt);
  EXPECT_EQ(r.trials, 1u);
  double sum = 0;
  for (const double f : r.frequencies) {
    EXPECT_TRUE(f == 0.0 || f == 1.0);
    sum += f;
  }
  EXPECT_EQ(sum, 1.0);
  ASSERT_TRUE(r.mean_mse);
  EXPECT_EQ(r.records[0].seed, 5u);
}

TEST(Trials, ParallelMatchesSequential) {
  const auto problem = toy_problem();
  TrialOptions seq, par;
  seq.jobs = 1;
  par.jobs = 3;
  const auto a = run_trials(problem, toy_config(1), 3, seq);
  const auto b = run_trials(problem, toy_config(1), 3, par);
  EXPECT_EQ(*a.mean_mse, *b.mean_mse);
  EXPECT_EQ(a.frequencies, b.frequencies);
}

TEST(Sweep, GridHelpers) {
  const std::vector<double> v{0, 1, 3, 5, 10};
  EXPECT_EQ(make_grid(v, v, {2}, {0.3}).size(), 25u);
  EXPECT_EQ(stepped_range(0, 10, 0.2).size(), 51u);
  EXPECT_EQ(stepped_range(0.1, 0.5, 0.02).size(), 21u);
  EXPECT_THROW(stepped_range(1, 0, 0.1), std::invalid_argument);
}

TEST(Sweep, SinglePointEqualsRunTrials) {
  const auto problem = toy_problem();
  TrialOptions opt;
  opt.jobs = 1;
  auto cfg = toy_config(1);
  const LossWeights point{1, 2, 3, 0.1};
  const auto s = sweep(problem, cfg, {point}, 2, opt);
  cfg.lambdas = point;
  const auto r = run_trials(problem, cfg, 2, opt);
  ASSERT_EQ(s.entries.size(), 1u);
  EXPECT_EQ(*s.entries[0].mean_mse, *r.mean_mse);
  EXPECT_EQ(s.entries[0].frequencies, r.frequencies);
  EXPECT_THROW(sweep(problem, cfg, {LossWeights{-1, 0, 0, 0}}, 1, opt),
               std::invalid_argument);
}

TEST(Baseline, ZeroLossWhenNetworkRealizesTruth) {
  // Mix two outputs of a fixed network: that network reproduces x exactly.
  auto problem = toy_problem(16);
  auto cfg = toy_config(1);
  cfg.batch_size = 1;
  auto f = init_baseline<float>(cfg.seed, cfg.model);
  const auto s = separate_baseline(f, problem.r1, problem.r2, problem.x, 16, 8);
  const auto data = make_dataset(problem.r1, problem.r2, s.x_bar, 16, 8);
  const auto trained = train_baseline(data, cfg);
  EXPECT_LT(trained.history[0], 1e-5);
  const auto again = separate_baseline(f, problem.r1, problem.r2, s.x_bar, 16, 8);
  for (const float v : again.error_map.pixels().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Baseline, IgnoresLossWeightsAndMatchesShapes) {
  const auto problem = toy_problem();
  const auto data = dataset_of(problem);
  auto a_cfg = toy_config(2), b_cfg = toy_config(2);
  b_cfg.lambdas = {0, 9, 0, 4};
  const auto a = train_baseline(data, a_cfg);
  const auto b = train_baseline(data, b_cfg);
  EXPECT_EQ(a.history, b.history);
  EXPECT_LT(a.history[1], a.history[0]);
  auto model = a.model;
  const auto s = separate_baseline(model, problem.r1, problem.r2, problem.x, 16, 8);
  EXPECT_TRUE(s.x1_hat.same_geometry(problem.x));
  EXPECT_TRUE(s.x2_hat.same_geometry(problem.x));
}

TEST(Synthetic, SeedDeterministicAndBounded) {
  SyntheticSpec spec;
  spec.seed = 4;
  spec.size = 48;
  spec.cracks = 3;
  spec.grain = 0.2;
  const auto a = generate_scene(spec), b = generate_scene(spec);
  EXPECT_EQ(a.r1, b.r1);
  EXPECT_EQ(a.x2, b.x2);
  spec.seed = 5;
  EXPECT_NE(generate_scene(spec).x1, a.x1);
  EXPECT_TRUE(a.r1.in_unit_range());
  for (const float v : a.x1.pixels().data()) EXPECT_LE(v, 0.5f);
  EXPECT_EQ(mix_images(a.x1, a.x2).factor, 1.0);
}

}  // namespace
}  // namespace xraysep
