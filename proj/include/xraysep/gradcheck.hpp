#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xraysep {

struct GradcheckOptions {
  std::uint64_t seed = 7;
  std::size_t cases = 10;      // random inputs per op
  double step = 1e-4;          // central-difference step
  double op_tolerance = 1e-5;  // single ops
  double graph_tolerance = 1e-4;  // composite loss through the whole model
  /// Test hook: corrupt the backward of this op on every tape (empty = off).
  std::string corrupt_op;
};

struct GradcheckResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t skipped = 0;  // probes straddling a ReLU/clamp kink
  double max_relative_error = 0;
  double tolerance = 0;
  bool passed = false;
};

/// Analytic vs central-difference gradients (in double precision) for every
/// differentiable op, plus the composite loss end to end on a single 8x8
/// patch. Relative error is ||analytic - numeric|| / max(||analytic||,
/// ||numeric||) over each checked input tensor. In the composite checks a
/// parameter probe whose +h/-h pair flips a ReLU or clamp is skipped.
std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options = {});

}  // namespace xraysep
