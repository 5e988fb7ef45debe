#pragma once

#include <filesystem>
#include <optional>

#include "xraysep/engine.hpp"

namespace xraysep {

/// Image files of one separation problem. Relative paths in a manifest file
/// are resolved against the manifest's directory.
struct DataManifest {
  std::filesystem::path r1, r2, x;
  std::optional<std::filesystem::path> x1, x2;  // ground truth, if known
  std::size_t patch_size = 64;
  std::size_t overlap = 56;

  bool has_truth() const { return x1 && x2; }
};

struct RunConfig {
  DataManifest data;
  TrainConfig train;
  std::filesystem::path out;
};

/// Parse a JSON manifest:
///
///   { "r1": "r1.png", "r2": "r2.png", "x": "x.png",
///     "x1": "x1.png", "x2": "x2.png",          (optional)
///     "patch_size": 64, "overlap": 56,          (optional)
///     "train": { "seed": 0, "epochs": 200, "batch_size": 32, "lr": 1e-4,
///                "lambda": [3, 5, 2, 0.3], "width": 128,
///                "baseline_width": 64, "snapshot_epochs": [1, 4, ...],
///                "squared_reconstruction": false,
///                "normalize_energy": true } }  (all optional)
///
/// Unknown keys are rejected. Throws DataError.
RunConfig load_manifest(const std::filesystem::path& path);

/// Write a manifest whose image paths are stored relative to its directory
/// when they live under it.
void save_manifest(const std::filesystem::path& path, const DataManifest& data,
                   const std::optional<TrainConfig>& train = std::nullopt);

/// Throw DataError unless every referenced image exists and is readable.
void check_readable(const DataManifest& data);

/// Load the images: r1/r2 must be RGB, x (and truths) grayscale or RGB
/// (RGB is reduced to luminance); all sizes must agree.
SeparationProblem load_problem(const DataManifest& data);

/// Sidecar of a mix: the global rescale factor applied to x1 + x2.
void save_mix_sidecar(const std::filesystem::path& path, const MixResult& mix,
                      double raw_max);

}  // namespace xraysep
