#include "xraysep/engine.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "xraysep/image_io.hpp"

namespace xraysep {
namespace {

constexpr std::size_t kInferenceBatch = 16;

void check_finite_gradients(const Tape<float>& tape,
                            const std::vector<NamedTensor<float>>& params,
                            const std::vector<Var>& leaves,
                            std::uint64_t seed, std::size_t epoch) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!tape.grad(leaves[i]).all_finite()) {
      throw TrainingError(seed, epoch,
                          "non-finite gradient for " + params[i].name);
    }
  }
}

LossBreakdown& operator+=(LossBreakdown& a, const LossBreakdown& b) {
  a.l1 += b.l1;
  a.l2 += b.l2;
  a.l3 += b.l3;
  a.l4 += b.l4;
  a.l5 += b.l5;
  a.total += b.total;
  return a;
}

LossBreakdown scaled(LossBreakdown a, double s) {
  a.l1 *= s;
  a.l2 *= s;
  a.l3 *= s;
  a.l4 *= s;
  a.l5 *= s;
  a.total *= s;
  return a;
}

/// Copy of `grid` with its patches replaced by network outputs.
PatchGrid with_patches(const PatchGrid& grid, Tensor<float> patches) {
  PatchGrid out;
  out.patch_size = grid.patch_size;
  out.stride = grid.stride;
  out.channels = patches.dim(1);
  out.height = grid.height;
  out.width = grid.width;
  out.padded_height = grid.padded_height;
  out.padded_width = grid.padded_width;
  out.origins = grid.origins;
  out.patches = std::move(patches);
  return out;
}

/// Run `fn(batch_indices, offset)` over the dataset in fixed-size chunks.
template <typename Fn>
void for_each_chunk(std::size_t count, Fn&& fn) {
  for (std::size_t start = 0; start < count; start += kInferenceBatch) {
    const std::size_t end = std::min(count, start + kInferenceBatch);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    fn(idx, start);
  }
}

void copy_rows(const Tensor<float>& src, Tensor<float>& dst,
               std::size_t offset) {
  std::copy(src.data().begin(), src.data().end(),
            dst.data().begin() + static_cast<long>(offset * (src.size() / src.dim(0))));
}

ImagePlane add_planes(const ImagePlane& a, const ImagePlane& b) {
  ImagePlane out(a.channels(), a.height(), a.width());
  for (std::size_t i = 0; i < a.pixels().size(); ++i) {
    out.pixels()[i] = a.pixels()[i] + b.pixels()[i];
  }
  return out;
}

ImagePlane abs_diff(const ImagePlane& a, const ImagePlane& b) {
  ImagePlane out(a.channels(), a.height(), a.width());
  for (std::size_t i = 0; i < a.pixels().size(); ++i) {
    out.pixels()[i] = std::fabs(a.pixels()[i] - b.pixels()[i]);
  }
  return out;
}

void require_same_size(const ImagePlane& r1, const ImagePlane& r2,
                       const ImagePlane& x) {
  if (!r1.same_geometry(r2) || !r1.same_geometry(x)) {
    throw DataError("separate: r1, r2 and x must have the same size");
  }
}

}  // namespace

void TrainConfig::validate() const {
  lambdas.validate();
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
}

TrainState initial_state(const TrainConfig& cfg) {
  TrainState state;
  state.weights = init_weights<float>(cfg.seed, cfg.model);
  for (const auto& p : state.weights.parameters()) {
    state.optimizer.emplace_back(p.tensor->shape());
  }
  return state;
}

void save_train_state(const std::filesystem::path& path,
                      const TrainState& state, const TrainConfig& cfg) {
  Archive archive;
  archive.set_meta("train.seed", static_cast<std::int64_t>(cfg.seed));
  archive.set_meta("train.epochs_done",
                   static_cast<std::int64_t>(state.epochs_done));
  archive.set_meta("train.batch_size", static_cast<std::int64_t>(cfg.batch_size));
  const LossWeights& l = cfg.lambdas;
  archive.put("train.hyper", Tensor<double>(Shape{5}, {cfg.lr, l.lambda1, l.lambda2,
                                                       l.lambda3, l.lambda4}));
  store_model(archive, state.weights);
  auto& weights = const_cast<ModelWeights<float>&>(state.weights);
  const auto params = weights.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = state.optimizer[i];
    archive.put("adam." + params[i].name + ".m", s.first_moment);
    archive.put("adam." + params[i].name + ".v", s.second_moment);
    archive.set_meta("adam." + params[i].name + ".step", s.step);
  }
  Tensor<double> history(Shape{state.history.size(), 6});
  for (std::size_t e = 0; e < state.history.size(); ++e) {
    const auto& h = state.history[e];
    const double row[6] = {h.l1, h.l2, h.l3, h.l4, h.l5, h.total};
    std::copy(row, row + 6, history.raw() + e * 6);
  }
  archive.put("train.history", std::move(history));
  save_archive(path, archive);
}

TrainState load_train_state(const std::filesystem::path& path,
                            const TrainConfig* expected) {
  const Archive archive = load_archive(path);
  TrainState state;
  state.weights = restore_model(archive);
  if (expected) {
    const auto* hyper = std::get_if<Tensor<double>>(&archive.get("train.hyper"));
    const LossWeights& l = expected->lambdas;
    const Tensor<double> want(Shape{5}, {expected->lr, l.lambda1, l.lambda2,
                                         l.lambda3, l.lambda4});
    const auto mismatch = [&](const std::string& what) {
      throw DataError("checkpoint " + path.string() + " was trained with a different " +
                      what + "; resume needs identical settings");
    };
    if (static_cast<std::uint64_t>(archive.get_meta("train.seed")) != expected->seed) {
      mismatch("seed");
    }
    if (static_cast<std::size_t>(archive.get_meta("train.batch_size")) !=
        expected->batch_size) {
      mismatch("batch size");
    }
    if (!hyper || !(*hyper == want)) mismatch("learning rate or lambda");
    if (state.weights.config.width != expected->model.width) mismatch("width");
  }
  state.epochs_done =
      static_cast<std::size_t>(archive.get_meta("train.epochs_done"));
  for (const auto& p : state.weights.parameters()) {
    AdamState<float> s;
    const auto* m = std::get_if<Tensor<float>>(&archive.get("adam." + p.name + ".m"));
    const auto* v = std::get_if<Tensor<float>>(&archive.get("adam." + p.name + ".v"));
    if (!m || !v || m->shape() != p.tensor->shape() ||
        v->shape() != p.tensor->shape()) {
      throw DataError("checkpoint optimizer state mismatch for " + p.name);
    }
    s.first_moment = *m;
    s.second_moment = *v;
    s.step = archive.get_meta("adam." + p.name + ".step");
    state.optimizer.push_back(std::move(s));
  }
  const auto* history =
      std::get_if<Tensor<double>>(&archive.get("train.history"));
  if (!history || history->rank() != 2 || history->dim(1) != 6) {
    throw DataError("checkpoint has a malformed loss history");
  }
  for (std::size_t e = 0; e < history->dim(0); ++e) {
    const double* row = history->raw() + e * 6;
    state.history.push_back({row[0], row[1], row[2], row[3], row[4], row[5]});
  }
  return state;
}

void train(const TripleDataset& data, const TrainConfig& cfg,
           TrainState& state, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.size() == 0) throw DataError("train: empty dataset");
  const BatchSampler sampler(data, cfg.batch_size, cfg.seed);
  AdamOptions adam = cfg.adam;
  adam.lr = cfg.lr;

  for (std::size_t epoch = state.epochs_done + 1; epoch <= cfg.epochs;
       ++epoch) {
    LossBreakdown sum;
    std::size_t seen = 0;
    for (auto& indices : sampler.epoch_batches(epoch)) {
      const Batch batch = sampler.gather(std::move(indices));
      const std::size_t n = batch.indices.size();
      Tape<float> tape;
      BoundModel<float> bound = bind(tape, state.weights, true);
      const Var r1 = tape.leaf(batch.r1);
      const Var r2 = tape.leaf(batch.r2);
      const Var x = tape.leaf(batch.x);
      LossTerms<float> terms;
      try {
        const GraphOutputs graph =
            forward_graph(tape, bound, r1, r2, BnMode::train);
        terms = loss_total(tape, graph, r1, r2, x, cfg.lambdas, cfg.variant);
      } catch (const NonFiniteError& e) {
        throw TrainingError(cfg.seed, epoch, e.what());
      }
      const LossBreakdown values = terms.values(tape);
      if (!std::isfinite(values.total)) {
        throw TrainingError(cfg.seed, epoch, "non-finite total loss");
      }
      tape.backward(terms.total);
      auto params = state.weights.parameters();
      check_finite_gradients(tape, params, bound.parameters, cfg.seed, epoch);
      for (std::size_t i = 0; i < params.size(); ++i) {
        adam_update(*params[i].tensor, tape.grad(bound.parameters[i]),
                    state.optimizer[i], adam);
      }
      sum += scaled(values, static_cast<double>(n));
      seen += n;
    }
    state.history.push_back(scaled(sum, 1.0 / static_cast<double>(seen)));
    state.epochs_done = epoch;
    spdlog::debug("seed {} epoch {}: total {:.6f}", cfg.seed, epoch,
                  state.history.back().total);
    if (on_epoch) on_epoch(epoch, state);
  }
}

TrainState train(const TripleDataset& data, const TrainConfig& cfg,
                 const EpochCallback& on_epoch) {
  cfg.validate();
  TrainState state = initial_state(cfg);
  train(data, cfg, state, on_epoch);
  return state;
}

SeparationResult separate(ModelWeights<float>& weights, const ImagePlane& r1,
                          const ImagePlane& r2, const ImagePlane& x,
                          std::size_t patch_size, std::size_t overlap) {
  require_same_size(r1, r2, x);
  const TripleDataset data = make_dataset(r1, r2, x, patch_size, overlap);
  const std::size_t count = data.size();
  const std::size_t p = patch_size;
  Tensor<float> x1(Shape{count, 1, p, p});
  Tensor<float> x2(Shape{count, 1, p, p});
  Tensor<float> rr1(Shape{count, 3, p, p});
  Tensor<float> rr2(Shape{count, 3, p, p});
  for_each_chunk(count, [&](const std::vector<std::size_t>& idx,
                            std::size_t offset) {
    Tape<float> tape;
    BoundModel<float> bound = bind(tape, weights, false);
    const Var a = tape.leaf(gather_patches(data.r1, idx));
    const Var b = tape.leaf(gather_patches(data.r2, idx));
    const GraphOutputs g = forward_graph(tape, bound, a, b, BnMode::eval);
    copy_rows(tape.value(g.x1_hat), x1, offset);
    copy_rows(tape.value(g.x2_hat), x2, offset);
    copy_rows(tape.value(g.r1_hat), rr1, offset);
    copy_rows(tape.value(g.r2_hat), rr2, offset);
  });
  SeparationResult result;
  result.x1_hat = stitch_patches(with_patches(data.x, std::move(x1)));
  result.x2_hat = stitch_patches(with_patches(data.x, std::move(x2)));
  result.r1_hat = stitch_patches(with_patches(data.r1, std::move(rr1)));
  result.r2_hat = stitch_patches(with_patches(data.r2, std::move(rr2)));
  result.x_bar = add_planes(result.x1_hat, result.x2_hat);
  result.error_map = abs_diff(x, result.x_bar);
  return result;
}

double residual_norm(const ImagePlane& a, const ImagePlane& b, bool raw_norm) {
  if (a.pixels().shape() != b.pixels().shape()) {
    throw std::invalid_argument("residual_norm: shape mismatch");
  }
  double acc = 0;
  for (std::size_t i = 0; i < a.pixels().size(); ++i) {
    const double d = static_cast<double>(a.pixels()[i]) - b.pixels()[i];
    acc += d * d;
  }
  const double norm = std::sqrt(acc);
  if (raw_norm) return norm;
  return norm / std::sqrt(static_cast<double>(a.pixels().size()));
}

double mse_eval(const std::vector<std::pair<ImagePlane, ImagePlane>>& trials,
                const ImagePlane& x1_truth, const ImagePlane& x2_truth,
                bool raw_norm) {
  if (trials.empty()) throw std::invalid_argument("mse_eval: no trials");
  double acc = 0;
  for (const auto& [x1_hat, x2_hat] : trials) {
    acc += residual_norm(x1_truth, x1_hat, raw_norm) +
           residual_norm(x2_truth, x2_hat, raw_norm);
  }
  return acc / (2.0 * static_cast<double>(trials.size()));
}

const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::separated:
      return "separated";
    case Outcome::one_sided:
      return "one_sided";
    case Outcome::leakage:
      return "leakage";
  }
  return "unknown";
}

OutcomeCase classify_outcome(const ImagePlane& x1_hat, const ImagePlane& x2_hat,
                             const ImagePlane& x,
                             const OutcomeThresholds& thresholds) {
  if (x1_hat.pixels().shape() != x2_hat.pixels().shape() ||
      !x1_hat.same_geometry(x)) {
    throw std::invalid_argument("classify_outcome: shape mismatch");
  }
  const ImagePlane zero(x1_hat.channels(), x1_hat.height(), x1_hat.width());
  const double e1 = residual_norm(x1_hat, zero, true);
  const double e2 = residual_norm(x2_hat, zero, true);
  OutcomeCase result;
  const double hi = std::max(e1, e2);
  result.energy_ratio = hi > 0 ? std::min(e1, e2) / hi : 0.0;

  Tape<double> tape;
  const Var a = tape.leaf(x1_hat.pixels().cast<double>());
  const Var b = tape.leaf(x2_hat.pixels().cast<double>());
  result.correlation = tape.value(pearson(tape, a, b))[0];

  if (result.energy_ratio < thresholds.energy_ratio) {
    result.label = Outcome::one_sided;
  } else if (std::fabs(result.correlation) > thresholds.correlation) {
    result.label = Outcome::leakage;
  } else {
    result.label = Outcome::separated;
  }
  return result;
}

SeparationResult train_and_separate(const SeparationProblem& problem,
                                    const TrainConfig& cfg,
                                    ModelWeights<float>* trained) {
  require_same_size(problem.r1, problem.r2, problem.x);
  const TripleDataset data = make_dataset(problem.r1, problem.r2, problem.x,
                                          problem.patch_size, problem.overlap);
  SeparationResult result;
  const auto snapshot = [&](std::size_t epoch, TrainState& state) {
    if (std::find(cfg.snapshot_epochs.begin(), cfg.snapshot_epochs.end(),
                  epoch) == cfg.snapshot_epochs.end()) {
      return;
    }
    SeparationResult s = separate(state.weights, problem.r1, problem.r2,
                                  problem.x, problem.patch_size,
                                  problem.overlap);
    result.snapshots[epoch] = {std::move(s.r1_hat), std::move(s.r2_hat),
                               std::move(s.x1_hat), std::move(s.x2_hat)};
  };
  TrainState state = train(data, cfg, snapshot);
  SeparationResult final_result =
      separate(state.weights, problem.r1, problem.r2, problem.x,
               problem.patch_size, problem.overlap);
  final_result.history = std::move(state.history);
  final_result.snapshots = std::move(result.snapshots);
  if (trained) *trained = std::move(state.weights);
  return final_result;
}

TrialsReport aggregate_trials(std::vector<TrialRecord> records,
                              const LossWeights& lambdas) {
  TrialsReport report;
  report.lambdas = lambdas;
  std::sort(records.begin(), records.end(),
            [](const TrialRecord& a, const TrialRecord& b) {
              return a.seed < b.seed;
            });
  report.trials = records.size();
  if (records.empty()) return report;
  double mse_sum = 0;
  bool all_mse = true;
  for (const auto& r : records) {
    report.frequencies[static_cast<std::size_t>(r.outcome.label)] += 1.0;
    if (r.mse) {
      mse_sum += *r.mse;
    } else {
      all_mse = false;
    }
  }
  for (auto& f : report.frequencies) f /= static_cast<double>(records.size());
  if (all_mse) report.mean_mse = mse_sum / static_cast<double>(records.size());
  report.records = std::move(records);
  return report;
}

TrialsReport run_trials(const SeparationProblem& problem,
                        const TrainConfig& cfg, std::size_t trials,
                        const TrialOptions& options) {
  if (trials < 1) throw std::invalid_argument("run_trials: need R >= 1");
  cfg.validate();
  std::vector<TrialRecord> records(trials);
  std::vector<std::exception_ptr> errors(trials);
  std::atomic<std::size_t> next{0};

  const auto worker = [&] {
    for (std::size_t i = next++; i < trials; i = next++) {
      TrainConfig trial_cfg = cfg;
      trial_cfg.seed = cfg.seed + i;
      trial_cfg.snapshot_epochs.clear();
      try {
        const SeparationResult s = train_and_separate(problem, trial_cfg);
        TrialRecord& rec = records[i];
        rec.seed = trial_cfg.seed;
        rec.outcome = classify_outcome(s.x1_hat, s.x2_hat, problem.x,
                                       options.thresholds);
        rec.recombination_error = residual_norm(problem.x, s.x_bar);
        rec.final_loss = s.history.back();
        if (problem.has_truth()) {
          // Side 1 always pairs with r1; no permutation search.
          rec.mse = mse_eval({{s.x1_hat, s.x2_hat}}, *problem.x1_truth,
                             *problem.x2_truth, options.raw_norm);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::size_t jobs = options.jobs ? options.jobs
                                  : std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, trials);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return aggregate_trials(std::move(records), cfg.lambdas);
}

std::vector<LossWeights> make_grid(const std::vector<double>& lambda1,
                                   const std::vector<double>& lambda2,
                                   const std::vector<double>& lambda3,
                                   const std::vector<double>& lambda4) {
  std::vector<LossWeights> grid;
  for (const double a : lambda1) {
    for (const double b : lambda2) {
      for (const double c : lambda3) {
        for (const double d : lambda4) {
          LossWeights w{a, b, c, d};
          w.validate();
          grid.push_back(w);
        }
      }
    }
  }
  return grid;
}

std::vector<double> stepped_range(double lo, double hi, double step) {
  if (!(step > 0) || hi < lo) {
    throw std::invalid_argument("stepped_range: need step > 0 and hi >= lo");
  }
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 0.5));
  for (std::size_t i = 0; i <= n; ++i) {
    out.push_back(lo + static_cast<double>(i) * step);
  }
  return out;
}

SweepReport sweep(const SeparationProblem& problem, const TrainConfig& base,
                  const std::vector<LossWeights>& grid, std::size_t trials,
                  const TrialOptions& options) {
  if (grid.empty()) throw std::invalid_argument("sweep: empty grid");
  for (const auto& w : grid) w.validate();
  SweepReport report;
  for (const auto& w : grid) {
    TrainConfig cfg = base;
    cfg.lambdas = w;
    report.entries.push_back(run_trials(problem, cfg, trials, options));
  }
  return report;
}

BaselineState train_baseline(const TripleDataset& data,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw DataError("train_baseline: empty dataset");
  BaselineState state;
  state.model = init_baseline<float>(cfg.seed, cfg.model);
  for (const auto& p : state.model.parameters()) {
    state.optimizer.emplace_back(p.tensor->shape());
  }
  const BatchSampler sampler(data, cfg.batch_size, cfg.seed);
  AdamOptions adam = cfg.adam;
  adam.lr = cfg.lr;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum = 0;
    std::size_t seen = 0;
    for (auto& indices : sampler.epoch_batches(epoch)) {
      const Batch batch = sampler.gather(std::move(indices));
      Tape<float> tape;
      const BoundBaseline<float> bound = bind(tape, state.model, true);
      const Var r1 = tape.leaf(batch.r1);
      const Var r2 = tape.leaf(batch.r2);
      const Var x = tape.leaf(batch.x);
      Var loss;
      try {
        const BaselineOutputs out = baseline_forward(tape, bound, r1, r2);
        const Var x_bar = add(tape, out.x1_hat, out.x2_hat);
        loss = mean(tape, frobenius_norm_per_sample(tape, sub(tape, x, x_bar)));
      } catch (const NonFiniteError& e) {
        throw TrainingError(cfg.seed, epoch, e.what());
      }
      tape.backward(loss);
      auto params = state.model.parameters();
      check_finite_gradients(tape, params, bound.parameters, cfg.seed, epoch);
      for (std::size_t i = 0; i < params.size(); ++i) {
        adam_update(*params[i].tensor, tape.grad(bound.parameters[i]),
                    state.optimizer[i], adam);
      }
      sum += tape.value(loss)[0] * static_cast<double>(batch.indices.size());
      seen += batch.indices.size();
    }
    state.history.push_back(sum / static_cast<double>(seen));
    state.epochs_done = epoch;
  }
  return state;
}

SeparationResult separate_baseline(BaselineModel<float>& model,
                                   const ImagePlane& r1, const ImagePlane& r2,
                                   const ImagePlane& x, std::size_t patch_size,
                                   std::size_t overlap) {
  require_same_size(r1, r2, x);
  const TripleDataset data = make_dataset(r1, r2, x, patch_size, overlap);
  const std::size_t count = data.size();
  Tensor<float> x1(Shape{count, 1, patch_size, patch_size});
  Tensor<float> x2(Shape{count, 1, patch_size, patch_size});
  for_each_chunk(count, [&](const std::vector<std::size_t>& idx,
                            std::size_t offset) {
    Tape<float> tape;
    const BoundBaseline<float> bound = bind(tape, model, false);
    const Var a = tape.leaf(gather_patches(data.r1, idx));
    const Var b = tape.leaf(gather_patches(data.r2, idx));
    const BaselineOutputs out = baseline_forward(tape, bound, a, b);
    copy_rows(tape.value(out.x1_hat), x1, offset);
    copy_rows(tape.value(out.x2_hat), x2, offset);
  });
  SeparationResult result;
  result.x1_hat = stitch_patches(with_patches(data.x, std::move(x1)));
  result.x2_hat = stitch_patches(with_patches(data.x, std::move(x2)));
  result.x_bar = add_planes(result.x1_hat, result.x2_hat);
  result.error_map = abs_diff(x, result.x_bar);
  return result;
}

}  // namespace xraysep
