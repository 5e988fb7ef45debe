#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "xraysep/engine.hpp"

namespace xraysep {

/// Header `epoch,l1,l2,l3,l4,l5,total`, one row per epoch.
void write_loss_csv(const std::filesystem::path& path,
                    const std::vector<LossBreakdown>& history);

/// Header `epoch,loss`, one row per epoch.
void write_baseline_loss_csv(const std::filesystem::path& path,
                             const std::vector<double>& history);

/// One row per grid point: lambdas, mean MSE (empty without ground truth),
/// case frequencies and R.
void write_sweep_csv(const std::filesystem::path& path,
                     const SweepReport& report);

/// Per-trial detail and the aggregate of every grid point.
void write_sweep_json(const std::filesystem::path& path,
                      const SweepReport& report);

/// Mean MSE laid out as a matrix over the two lambdas that vary in the grid
/// (first column: row lambda, header: column lambda). Returns false, writing
/// nothing, when the grid does not vary exactly two lambdas or has no truth.
bool write_mse_surface(const std::filesystem::path& path,
                       const SweepReport& report);

/// Per-epoch snapshot images: epoch_{E}_{r1hat|r2hat|x1hat|x2hat}.png.
void write_snapshots(const std::filesystem::path& dir,
                     const SeparationResult& result);

}  // namespace xraysep
