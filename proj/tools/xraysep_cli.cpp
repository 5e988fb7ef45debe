// xraysep: separate a mixed X-ray of a double-sided painting into per-side
// X-rays using the two RGB sides as side information.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <json.hpp>
#include <sstream>

#include "xraysep/gradcheck.hpp"
#include "xraysep/image_io.hpp"
#include "xraysep/manifest.hpp"
#include "xraysep/report.hpp"
#include "xraysep/synthetic.hpp"

namespace fs = std::filesystem;
using namespace xraysep;

namespace {

constexpr int kUsage = 1;
constexpr int kDataError = 2;
constexpr int kNumerical = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flags shared by the commands that train a model.
struct TrainFlags {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  double lr = 0;
  std::size_t patch_size = 0;
  std::size_t overlap = 0;
  std::size_t width = 0;
  bool raw_norm = false;

  std::vector<CLI::Option*> given;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* patch_opt = nullptr;
  CLI::Option* overlap_opt = nullptr;
  CLI::Option* width_opt = nullptr;

  void add(CLI::App* cmd, const char* width_help) {
    cmd->add_option("--manifest", manifest, "JSON dataset manifest")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "Run directory (created if missing)")->required();
    seed_opt = cmd->add_option("--seed", seed, "RNG seed");
    epochs_opt = cmd->add_option("--epochs", epochs, "Training epochs")
                     ->check(CLI::PositiveNumber);
    batch_opt = cmd->add_option("--batch-size", batch_size, "Patches per step")
                    ->check(CLI::PositiveNumber);
    lr_opt = cmd->add_option("--lr", lr, "ADAM learning rate")
                 ->check(CLI::PositiveNumber);
    patch_opt = cmd->add_option("--patch-size", patch_size,
                                "Patch side (multiple of 8)");
    overlap_opt = cmd->add_option("--overlap", overlap,
                                  "Overlap of neighbouring patches");
    width_opt = cmd->add_option("--width", width, width_help)
                    ->check(CLI::PositiveNumber);
    cmd->add_flag("--raw-norm", raw_norm,
                  "Report plain Frobenius norms instead of per-pixel RMS");
  }

  /// Manifest values overridden by every flag that was given.
  RunConfig resolve(bool baseline) const {
    RunConfig cfg = load_manifest(manifest);
    cfg.out = out;
    if (seed_opt->count()) cfg.train.seed = seed;
    if (epochs_opt->count()) cfg.train.epochs = epochs;
    if (batch_opt->count()) cfg.train.batch_size = batch_size;
    if (lr_opt->count()) cfg.train.lr = lr;
    if (patch_opt->count()) cfg.data.patch_size = patch_size;
    if (overlap_opt->count()) cfg.data.overlap = overlap;
    if (width_opt->count()) {
      (baseline ? cfg.train.model.baseline_width : cfg.train.model.width) = width;
    }
    return cfg;
  }
};

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create " + out.string() + ": " + ec.message());
}

nlohmann::ordered_json loss_json(const LossBreakdown& l) {
  return {{"l1", l.l1}, {"l2", l.l2}, {"l3", l.l3},
          {"l4", l.l4}, {"l5", l.l5}, {"total", l.total}};
}

/// Final images plus the summary every separating command writes.
void write_outputs(const fs::path& out, const SeparationProblem& problem,
                   const SeparationResult& result, bool raw_norm,
                   nlohmann::ordered_json summary) {
  save_png(out / "x1hat.png", result.x1_hat, 16);
  save_png(out / "x2hat.png", result.x2_hat, 16);
  save_png(out / "xbar.png", result.x_bar, 16);
  save_png(out / "error.png", result.error_map, 16);
  if (result.r1_hat.height() > 0) {
    save_png(out / "r1hat.png", result.r1_hat, 8);
    save_png(out / "r2hat.png", result.r2_hat, 8);
  }
  const OutcomeCase oc = classify_outcome(result.x1_hat, result.x2_hat, problem.x);
  summary["recombination_error"] = residual_norm(problem.x, result.x_bar, raw_norm);
  summary["outcome"] = {{"label", outcome_name(oc.label)},
                        {"energy_ratio", oc.energy_ratio},
                        {"correlation", oc.correlation}};
  if (problem.has_truth()) {
    summary["mse"] = mse_eval({{result.x1_hat, result.x2_hat}}, *problem.x1_truth,
                              *problem.x2_truth, raw_norm);
  }
  summary["norm"] = raw_norm ? "frobenius" : "per_pixel_rms";
  std::ofstream f(out / "summary.json", std::ios::trunc);
  if (!f) throw DataError("cannot write summary.json");
  f << summary.dump(2) << '\n';
  std::printf("%s\n", summary.dump(2).c_str());
}

// ---------------------------------------------------------------- commands

struct MixArgs {
  std::string synthetic;
  std::string x1, x2;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t size = 128;
  std::size_t cracks = 0;
  double grain = 0;
};

int run_mix(const MixArgs& a) {
  const fs::path out(a.out);
  const bool from_files = !a.x1.empty();
  if (from_files == !a.synthetic.empty()) {
    throw UsageError("mix needs either --synthetic or both --x1 and --x2");
  }
  ImagePlane x1, x2;
  std::optional<SyntheticScene> scene;
  if (from_files) {
    x1 = load_png(a.x1);
    x2 = load_png(a.x2);
    if (x1.channels() == 3) x1 = luminance(x1);
    if (x2.channels() == 3) x2 = luminance(x2);
    if (x1.height() != x2.height() || x1.width() != x2.width()) {
      throw DataError("mix: x1 and x2 differ in size");
    }
  } else {
    SyntheticSpec spec;
    spec.kind = parse_synthetic_kind(a.synthetic);
    spec.seed = a.seed;
    spec.size = a.size;
    spec.cracks = a.cracks;
    spec.grain = a.grain;
    scene = generate_scene(spec);
    x1 = scene->x1;
    x2 = scene->x2;
  }
  prepare_out(out);
  const MixResult mix = mix_images(x1, x2);
  double raw_max = 0;
  for (std::size_t i = 0; i < x1.pixels().size(); ++i) {
    raw_max = std::max(raw_max, static_cast<double>(x1.pixels()[i]) + x2.pixels()[i]);
  }
  save_png(out / "x.png", mix.mixed, 16);
  save_png(out / "x1.png", x1, 16);
  save_png(out / "x2.png", x2, 16);
  save_mix_sidecar(out / "mix.json", mix, raw_max);
  if (scene) {
    save_png(out / "r1.png", scene->r1, 16);
    save_png(out / "r2.png", scene->r2, 16);
    DataManifest m;
    m.r1 = out / "r1.png";
    m.r2 = out / "r2.png";
    m.x = out / "x.png";
    m.x1 = out / "x1.png";
    m.x2 = out / "x2.png";
    save_manifest(out / "manifest.json", m);
  }
  spdlog::info("mixed {}x{} image written to {} (factor {})", x1.height(),
               x1.width(), out.string(), mix.factor);
  return 0;
}

struct TrainArgs {
  TrainFlags common;
  double lambda[4] = {0, 0, 0, 0};
  CLI::Option* lambda_opt[4] = {};
  std::string resume;
  std::vector<std::size_t> snapshots;
  CLI::Option* snapshots_opt = nullptr;
  bool squared = false;
  bool raw_energy = false;
};

void apply_lambdas(const TrainArgs& a, TrainConfig& cfg) {
  double* slots[4] = {&cfg.lambdas.lambda1, &cfg.lambdas.lambda2,
                      &cfg.lambdas.lambda3, &cfg.lambdas.lambda4};
  for (int i = 0; i < 4; ++i) {
    if (a.lambda_opt[i]->count()) *slots[i] = a.lambda[i];
  }
}

int run_train(const TrainArgs& a) {
  RunConfig cfg = a.common.resolve(false);
  apply_lambdas(a, cfg.train);
  if (a.snapshots_opt->count()) cfg.train.snapshot_epochs = a.snapshots;
  if (a.squared) cfg.train.variant.squared_reconstruction = true;
  if (a.raw_energy) cfg.train.variant.normalize_energy = false;
  cfg.train.validate();
  const SeparationProblem problem = load_problem(cfg.data);
  const fs::path out = cfg.out;
  prepare_out(out);
  prepare_out(out / "snapshots");
  DataManifest resolved = cfg.data;
  save_manifest(out / "config.json", resolved, cfg.train);

  const TripleDataset data = make_dataset(problem.r1, problem.r2, problem.x,
                                          problem.patch_size, problem.overlap);
  TrainState state = a.resume.empty()
                         ? initial_state(cfg.train)
                         : load_train_state(a.resume, &cfg.train);
  if (state.epochs_done >= cfg.train.epochs) {
    throw UsageError("checkpoint already has " + std::to_string(state.epochs_done) +
                     " epochs; ask for more with --epochs");
  }
  spdlog::info("training {} patches, epochs {}..{}, seed {}", data.size(),
               state.epochs_done + 1, cfg.train.epochs, cfg.train.seed);
  const auto& snaps = cfg.train.snapshot_epochs;
  const auto on_epoch = [&](std::size_t epoch, TrainState& s) {
    const LossBreakdown& l = s.history.back();
    spdlog::info("epoch {:4d}  l1 {:.4f}  l2 {:.4f}  l3 {:.4f}  l4 {:.5f}  l5 {:.4f}  "
                 "total {:.4f}",
                 epoch, l.l1, l.l2, l.l3, l.l4, l.l5, l.total);
    write_loss_csv(out / "loss.csv", s.history);
    save_train_state(out / "checkpoint.bin", s, cfg.train);
    if (std::find(snaps.begin(), snaps.end(), epoch) != snaps.end()) {
      SeparationResult r = separate(s.weights, problem.r1, problem.r2, problem.x,
                                    problem.patch_size, problem.overlap);
      SeparationResult snap;
      snap.snapshots[epoch] = {std::move(r.r1_hat), std::move(r.r2_hat),
                               std::move(r.x1_hat), std::move(r.x2_hat)};
      write_snapshots(out / "snapshots", snap);
    }
  };
  train(data, cfg.train, state, on_epoch);
  const SeparationResult result =
      separate(state.weights, problem.r1, problem.r2, problem.x,
               problem.patch_size, problem.overlap);
  nlohmann::ordered_json summary;
  summary["command"] = "train";
  summary["seed"] = cfg.train.seed;
  summary["epochs"] = state.epochs_done;
  summary["final_loss"] = loss_json(state.history.back());
  write_outputs(out, problem, result, a.common.raw_norm, summary);
  return 0;
}

struct SeparateArgs {
  std::string manifest, checkpoint, out;
  std::size_t patch_size = 0, overlap = 0;
  CLI::Option* patch_opt = nullptr;
  CLI::Option* overlap_opt = nullptr;
  bool raw_norm = false;
};

int run_separate(const SeparateArgs& a) {
  RunConfig cfg = load_manifest(a.manifest);
  if (a.patch_opt->count()) cfg.data.patch_size = a.patch_size;
  if (a.overlap_opt->count()) cfg.data.overlap = a.overlap;
  const SeparationProblem problem = load_problem(cfg.data);
  ModelWeights<float> weights = load_model(a.checkpoint);
  const fs::path out(a.out);
  prepare_out(out);
  const SeparationResult result = separate(weights, problem.r1, problem.r2,
                                           problem.x, problem.patch_size,
                                           problem.overlap);
  nlohmann::ordered_json summary;
  summary["command"] = "separate";
  summary["checkpoint"] = a.checkpoint;
  write_outputs(out, problem, result, a.raw_norm, summary);
  return 0;
}

/// "0,1.5,3" or "lo:hi:step".
std::vector<double> parse_values(const std::string& text, const char* flag) {
  try {
    const auto colon = std::count(text.begin(), text.end(), ':');
    if (colon == 2) {
      const auto a = text.find(':');
      const auto b = text.find(':', a + 1);
      return stepped_range(std::stod(text.substr(0, a)),
                           std::stod(text.substr(a + 1, b - a - 1)),
                           std::stod(text.substr(b + 1)));
    }
    std::vector<double> values;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    }
    if (values.empty()) throw std::invalid_argument(text);
    return values;
  } catch (const std::exception&) {
    throw UsageError(std::string(flag) + ": expected a list like 0,1,2 or lo:hi:step, got '" +
                     text + "'");
  }
}

struct SweepArgs {
  TrainFlags common;
  std::string lambda[4];
  std::size_t trials = 1;
  std::size_t jobs = 0;
};

int run_sweep(const SweepArgs& a) {
  RunConfig cfg = a.common.resolve(false);
  const LossWeights& d = cfg.train.lambdas;
  const double defaults[4] = {d.lambda1, d.lambda2, d.lambda3, d.lambda4};
  const char* names[4] = {"--lambda1", "--lambda2", "--lambda3", "--lambda4"};
  std::vector<double> axes[4];
  for (int i = 0; i < 4; ++i) {
    axes[i] = a.lambda[i].empty() ? std::vector<double>{defaults[i]}
                                  : parse_values(a.lambda[i], names[i]);
  }
  const auto grid = make_grid(axes[0], axes[1], axes[2], axes[3]);
  cfg.train.snapshot_epochs.clear();
  cfg.train.validate();
  const SeparationProblem problem = load_problem(cfg.data);
  const fs::path out = cfg.out;
  prepare_out(out);
  spdlog::info("sweep: {} grid points x {} trials, {} epochs each", grid.size(),
               a.trials, cfg.train.epochs);
  TrialOptions options;
  options.raw_norm = a.common.raw_norm;
  options.jobs = a.jobs;
  const SweepReport report = sweep(problem, cfg.train, grid, a.trials, options);
  write_sweep_csv(out / "sweep.csv", report);
  write_sweep_json(out / "sweep.json", report);
  if (write_mse_surface(out / "mse_surface.csv", report)) {
    spdlog::info("MSE surface written to {}", (out / "mse_surface.csv").string());
  }
  std::printf("%-28s %10s %9s %9s %9s\n", "lambda", "mean_mse", "separated",
              "one_sided", "leakage");
  for (const auto& e : report.entries) {
    const std::string l = fmt::format("({:g},{:g},{:g},{:g})", e.lambdas.lambda1,
                                      e.lambdas.lambda2, e.lambdas.lambda3,
                                      e.lambdas.lambda4);
    const std::string mse = e.mean_mse ? fmt::format("{:.6f}", *e.mean_mse) : "-";
    std::printf("%-28s %10s %9.3f %9.3f %9.3f\n", l.c_str(), mse.c_str(),
                e.frequencies[0], e.frequencies[1], e.frequencies[2]);
  }
  return 0;
}

int run_baseline(const TrainFlags& a) {
  RunConfig cfg = a.resolve(true);
  cfg.train.validate();
  const SeparationProblem problem = load_problem(cfg.data);
  const fs::path out = cfg.out;
  prepare_out(out);
  const TripleDataset data = make_dataset(problem.r1, problem.r2, problem.x,
                                          problem.patch_size, problem.overlap);
  spdlog::info("baseline: {} patches, {} epochs, seed {}", data.size(),
               cfg.train.epochs, cfg.train.seed);
  BaselineState state = train_baseline(data, cfg.train);
  write_baseline_loss_csv(out / "loss.csv", state.history);
  Archive archive;
  store_baseline(archive, state.model);
  save_archive(out / "baseline.bin", archive);
  const SeparationResult result =
      separate_baseline(state.model, problem.r1, problem.r2, problem.x,
                        problem.patch_size, problem.overlap);
  nlohmann::ordered_json summary;
  summary["command"] = "baseline";
  summary["seed"] = cfg.train.seed;
  summary["epochs"] = state.epochs_done;
  summary["final_loss"] = state.history.back();
  write_outputs(out, problem, result, a.raw_norm, summary);
  return 0;
}

int run_gradcheck_cmd(const GradcheckOptions& options) {
  const auto results = run_gradcheck(options);
  bool ok = true;
  std::printf("%-24s %6s %14s %10s  %s\n", "op", "cases", "max_rel_err",
              "tolerance", "result");
  for (const auto& r : results) {
    std::printf("%-24s %6zu %14.3e %10.0e  %s\n", r.name.c_str(), r.cases,
                r.max_relative_error, r.tolerance, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? 0 : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("xraysep"));
  spdlog::set_pattern("[%H:%M:%S] %v");

  CLI::App app{"Separate a mixed X-ray of a double-sided painting"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  MixArgs mix;
  auto* mix_cmd = app.add_subcommand("mix", "Create a mixed X-ray");
  mix_cmd->add_option("--synthetic", mix.synthetic, "texture-pair | gradient-pair");
  mix_cmd->add_option("--x1", mix.x1, "First X-ray image")->check(CLI::ExistingFile);
  mix_cmd->add_option("--x2", mix.x2, "Second X-ray image")->check(CLI::ExistingFile);
  mix_cmd->add_option("--out", mix.out, "Output directory")->required();
  mix_cmd->add_option("--seed", mix.seed, "Generator seed");
  mix_cmd->add_option("--size", mix.size, "Synthetic image side")
      ->check(CLI::Range(8, 8192));
  mix_cmd->add_option("--cracks", mix.cracks, "X-ray-only cracks on side 1");
  mix_cmd->add_option("--grain", mix.grain, "X-ray-only wood grain strength on side 2")
      ->check(CLI::Range(0.0, 0.5));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train on one painting and separate it");
  tr.common.add(train_cmd, "Feature maps per layer");
  for (int i = 0; i < 4; ++i) {
    tr.lambda_opt[i] =
        train_cmd->add_option("--lambda" + std::to_string(i + 1), tr.lambda[i],
                              "Loss weight " + std::to_string(i + 1))
            ->check(CLI::NonNegativeNumber);
  }
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint")
      ->check(CLI::ExistingFile);
  tr.snapshots_opt = train_cmd->add_option("--snapshot-epochs", tr.snapshots,
                                           "Epochs that write snapshot images")
                         ->delimiter(',');
  train_cmd->add_flag("--squared-reconstruction", tr.squared,
                      "Square the reconstruction norms");
  train_cmd->add_flag("--raw-energy", tr.raw_energy,
                      "Do not divide the energy term by the pixel count");

  SeparateArgs sep;
  auto* sep_cmd = app.add_subcommand("separate", "Separate with a trained checkpoint");
  sep_cmd->add_option("--manifest", sep.manifest, "JSON dataset manifest")
      ->required()
      ->check(CLI::ExistingFile);
  sep_cmd->add_option("--checkpoint", sep.checkpoint, "Trained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  sep_cmd->add_option("--out", sep.out, "Output directory")->required();
  sep.patch_opt = sep_cmd->add_option("--patch-size", sep.patch_size, "Patch side");
  sep.overlap_opt = sep_cmd->add_option("--overlap", sep.overlap, "Patch overlap");
  sep_cmd->add_flag("--raw-norm", sep.raw_norm,
                    "Report plain Frobenius norms instead of per-pixel RMS");

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Grid search over the loss weights");
  sw.common.add(sweep_cmd, "Feature maps per layer");
  for (int i = 0; i < 4; ++i) {
    sweep_cmd->add_option("--lambda" + std::to_string(i + 1), sw.lambda[i],
                          "Values of loss weight " + std::to_string(i + 1) +
                              ": a,b,c or lo:hi:step");
  }
  sweep_cmd->add_option("--trials", sw.trials, "Trials per grid point")
      ->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--jobs", sw.jobs, "Parallel trials (0 = all cores)");

  TrainFlags base;
  auto* base_cmd = app.add_subcommand("baseline", "Train the single-objective baseline");
  base.add(base_cmd, "Hidden feature maps of the baseline");

  GradcheckOptions gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc_cmd->add_option("--seed", gc.seed, "RNG seed");
  gc_cmd->add_option("--cases", gc.cases, "Random inputs per op")
      ->check(CLI::PositiveNumber);
  gc_cmd->add_option("--corrupt-op", gc.corrupt_op,
                     "Test hook: corrupt the backward of this op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }
  if (verbose) spdlog::set_level(spdlog::level::debug);

  try {
    if (*mix_cmd) return run_mix(mix);
    if (*train_cmd) return run_train(tr);
    if (*sep_cmd) return run_separate(sep);
    if (*sweep_cmd) return run_sweep(sw);
    if (*base_cmd) return run_baseline(base);
    if (*gc_cmd) return run_gradcheck_cmd(gc);
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return kDataError;
  } catch (const TrainingError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return kNumerical;
  } catch (const NonFiniteError& e) {
    spdlog::error("numerical failure in {}: {}", e.op(), e.what());
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kDataError;
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kDataError;
  }
  return kUsage;
}
