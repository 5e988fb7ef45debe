#pragma once

#include <cstdint>
#include <string>

#include "xraysep/pipeline.hpp"

namespace xraysep {

enum class SyntheticKind { texture_pair, gradient_pair };

SyntheticKind parse_synthetic_kind(const std::string& name);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::texture_pair;
  std::uint64_t seed = 0;
  std::size_t size = 128;
  /// X-ray-only detail that has no counterpart in the RGB images.
  std::size_t cracks = 0;
  double grain = 0.0;
};

/// Two painted sides with their individual X-rays. Each X-ray stays within
/// [0, 0.5] so the raw mix already fits [0, 1].
struct SyntheticScene {
  ImagePlane r1, r2;  // RGB
  ImagePlane x1, x2;  // ground-truth X-ray per side
};

/// Fully determined by the spec, including the seed.
SyntheticScene generate_scene(const SyntheticSpec& spec);

}  // namespace xraysep
