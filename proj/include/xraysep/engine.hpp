#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "xraysep/adam.hpp"
#include "xraysep/checkpoint.hpp"
#include "xraysep/losses.hpp"
#include "xraysep/model.hpp"
#include "xraysep/pipeline.hpp"

namespace xraysep {

struct TrainConfig {
  LossWeights lambdas{};
  double lr = 1e-4;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  LossVariant variant{};
  std::vector<std::size_t> snapshot_epochs{1, 4, 10, 50, 100, 150, 200};
  ModelConfig model{};
  AdamOptions adam{};  // adam.lr is overwritten by lr

  void validate() const;
};

/// Raised when training produces a non-finite value.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::uint64_t seed, std::size_t epoch, const std::string& what)
      : std::runtime_error("seed " + std::to_string(seed) + ", epoch " +
                           std::to_string(epoch) + ": " + what),
        seed_(seed),
        epoch_(epoch) {}
  std::uint64_t seed() const { return seed_; }
  std::size_t epoch() const { return epoch_; }

 private:
  std::uint64_t seed_;
  std::size_t epoch_;
};

/// Everything needed to continue training bit-identically.
struct TrainState {
  ModelWeights<float> weights;
  std::vector<AdamState<float>> optimizer;  // parallel to weights.parameters()
  std::size_t epochs_done = 0;
  std::vector<LossBreakdown> history;  // one row per finished epoch
};

TrainState initial_state(const TrainConfig& cfg);

void save_train_state(const std::filesystem::path& path,
                      const TrainState& state, const TrainConfig& cfg);
/// With `expected`, throws DataError unless the checkpoint was written under
/// the same seed, batch size, learning rate, lambdas and width.
TrainState load_train_state(const std::filesystem::path& path,
                            const TrainConfig* expected = nullptr);

/// Called after each finished epoch (1-based epoch number).
using EpochCallback = std::function<void(std::size_t epoch, TrainState&)>;

/// Run epochs state.epochs_done+1 .. cfg.epochs of joint ADAM training on
/// the composite loss. Deterministic given cfg.seed and the data.
void train(const TripleDataset& data, const TrainConfig& cfg,
           TrainState& state, const EpochCallback& on_epoch = {});

/// Fresh weights from cfg.seed, trained for cfg.epochs.
TrainState train(const TripleDataset& data, const TrainConfig& cfg,
                 const EpochCallback& on_epoch = {});

/// Full-size outputs of one separation run.
struct SeparationResult {
  ImagePlane x1_hat, x2_hat;
  ImagePlane x_bar;      // x1_hat + x2_hat, not rescaled
  ImagePlane error_map;  // |x - x_bar|
  ImagePlane r1_hat, r2_hat;  // empty for the baseline
  std::vector<LossBreakdown> history;
  struct Snapshot {
    ImagePlane r1_hat, r2_hat, x1_hat, x2_hat;
  };
  std::map<std::size_t, Snapshot> snapshots;
};

/// Separate full images patch by patch (BN in eval mode) and stitch.
SeparationResult separate(ModelWeights<float>& weights, const ImagePlane& r1,
                          const ImagePlane& r2, const ImagePlane& x,
                          std::size_t patch_size = 64,
                          std::size_t overlap = 56);

/// Per-pixel root-mean-square of a - b (raw: plain Frobenius norm).
double residual_norm(const ImagePlane& a, const ImagePlane& b,
                     bool raw_norm = false);

/// Average separation error over R trials: (1/2R) sum_r (||X1 - X1_r|| +
/// ||X2 - X2_r||), each norm divided by sqrt(pixel count) unless raw_norm.
double mse_eval(const std::vector<std::pair<ImagePlane, ImagePlane>>& trials,
                const ImagePlane& x1_truth, const ImagePlane& x2_truth,
                bool raw_norm = false);

enum class Outcome { separated = 0, one_sided = 1, leakage = 2 };
const char* outcome_name(Outcome o);

struct OutcomeThresholds {
  double energy_ratio = 0.15;
  double correlation = 0.5;
};

struct OutcomeCase {
  Outcome label = Outcome::separated;
  double energy_ratio = 0;  // min(||x1||, ||x2||) / max(...)
  double correlation = 0;   // pearson(x1_hat, x2_hat)
};

OutcomeCase classify_outcome(const ImagePlane& x1_hat, const ImagePlane& x2_hat,
                             const ImagePlane& x,
                             const OutcomeThresholds& thresholds = {});

/// Inputs of one separation experiment; truth is optional.
struct SeparationProblem {
  ImagePlane r1, r2, x;
  std::optional<ImagePlane> x1_truth, x2_truth;
  std::size_t patch_size = 64;
  std::size_t overlap = 56;

  bool has_truth() const { return x1_truth && x2_truth; }
};

/// Train on the problem and separate it; snapshots are taken at
/// cfg.snapshot_epochs.
SeparationResult train_and_separate(const SeparationProblem& problem,
                                    const TrainConfig& cfg,
                                    ModelWeights<float>* trained = nullptr);

struct TrialRecord {
  std::uint64_t seed = 0;
  std::optional<double> mse;
  OutcomeCase outcome;
  double recombination_error = 0;  // residual_norm(x, x_bar)
  LossBreakdown final_loss;
};

struct TrialsReport {
  LossWeights lambdas;
  std::size_t trials = 0;
  std::optional<double> mean_mse;
  std::array<double, 3> frequencies{};  // indexed by Outcome
  std::vector<TrialRecord> records;     // sorted by seed
};

struct TrialOptions {
  OutcomeThresholds thresholds{};
  bool raw_norm = false;
  std::size_t jobs = 0;  // 0 = hardware concurrency
};

/// R independent runs with seeds cfg.seed .. cfg.seed + R - 1.
TrialsReport run_trials(const SeparationProblem& problem,
                        const TrainConfig& cfg, std::size_t trials,
                        const TrialOptions& options = {});

/// Aggregate already-finished trial records (order-independent).
TrialsReport aggregate_trials(std::vector<TrialRecord> records,
                              const LossWeights& lambdas);

struct SweepReport {
  std::vector<TrialsReport> entries;
};

/// Cartesian product of per-lambda value lists.
std::vector<LossWeights> make_grid(const std::vector<double>& lambda1,
                                   const std::vector<double>& lambda2,
                                   const std::vector<double>& lambda3,
                                   const std::vector<double>& lambda4);

/// lo, lo + step, ... up to hi (inclusive within half a step).
std::vector<double> stepped_range(double lo, double hi, double step);

SweepReport sweep(const SeparationProblem& problem, const TrainConfig& base,
                  const std::vector<LossWeights>& grid, std::size_t trials,
                  const TrialOptions& options = {});

// Single-objective baseline: min_F ||x - F(r1) - F(r2)||_F.

struct BaselineState {
  BaselineModel<float> model;
  std::vector<AdamState<float>> optimizer;
  std::size_t epochs_done = 0;
  std::vector<double> history;
};

BaselineState train_baseline(const TripleDataset& data, const TrainConfig& cfg);

SeparationResult separate_baseline(BaselineModel<float>& model,
                                   const ImagePlane& r1, const ImagePlane& r2,
                                   const ImagePlane& x,
                                   std::size_t patch_size = 64,
                                   std::size_t overlap = 56);

}  // namespace xraysep
