#pragma once

#include <filesystem>

#include "xraysep/pipeline.hpp"

namespace xraysep {

/// Raised for unreadable, malformed or mismatched input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Load an 8- or 16-bit grayscale/RGB PNG scaled to [0,1]. Alpha is dropped;
/// palette images are expanded.
ImagePlane load_png(const std::filesystem::path& path);

/// Save a 1- or 3-channel plane. Values are clamped to [0,1] and rounded to
/// the nearest code of the chosen bit depth (8 or 16).
void save_png(const std::filesystem::path& path, const ImagePlane& image,
              int bit_depth = 16);

}  // namespace xraysep
