#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "xraysep/tensor.hpp"

namespace xraysep {

/// A 1- or 3-channel image stored as a [C, H, W] float tensor.
class ImagePlane {
 public:
  ImagePlane() = default;
  ImagePlane(std::size_t channels, std::size_t height, std::size_t width,
             float fill = 0.0f);
  explicit ImagePlane(Tensor<float> pixels);

  std::size_t channels() const { return pixels_.dim(0); }
  std::size_t height() const { return pixels_.dim(1); }
  std::size_t width() const { return pixels_.dim(2); }
  std::size_t pixel_count() const { return height() * width(); }

  float& at(std::size_t c, std::size_t h, std::size_t w) {
    return pixels_[(c * height() + h) * width() + w];
  }
  float at(std::size_t c, std::size_t h, std::size_t w) const {
    return pixels_[(c * height() + h) * width() + w];
  }

  const Tensor<float>& pixels() const { return pixels_; }
  Tensor<float>& pixels() { return pixels_; }

  bool in_unit_range() const;
  /// Throws std::invalid_argument naming `what` if any pixel is outside [0,1].
  void require_unit_range(const char* what) const;
  bool same_geometry(const ImagePlane& other) const;

  bool operator==(const ImagePlane&) const = default;

 private:
  Tensor<float> pixels_{Shape{0, 0, 0}};
};

/// ITU-R 601 luma of an RGB plane.
ImagePlane luminance(const ImagePlane& rgb);

/// Fixed-size square patches in raster order plus the geometry to undo them.
struct PatchGrid {
  std::size_t patch_size = 64;
  std::size_t stride = 8;
  std::size_t channels = 1;
  std::size_t height = 0;         // source image
  std::size_t width = 0;
  std::size_t padded_height = 0;  // after reflect padding
  std::size_t padded_width = 0;
  std::vector<std::pair<std::size_t, std::size_t>> origins;  // (row, col)
  Tensor<float> patches;  // [N, C, p, p]

  std::size_t count() const { return origins.size(); }
  /// Copy of patch i as [C, p, p].
  Tensor<float> patch(std::size_t i) const;
  bool same_layout(const PatchGrid& other) const;
};

/// Number of valid origins along an axis of length `extent`.
std::size_t patches_along(std::size_t extent, std::size_t patch_size,
                          std::size_t stride);

/// Cut `img` into p x p patches whose neighbours share `overlap` pixels.
/// Sizes that do not fit the stride are reflect-padded on the bottom/right.
PatchGrid extract_patches(const ImagePlane& img, std::size_t patch_size = 64,
                          std::size_t overlap = 56);

/// Inverse of extract_patches: each pixel is the mean of the patch values
/// covering it; padding is cropped away.
ImagePlane stitch_patches(const PatchGrid& grid);

struct MixResult {
  ImagePlane mixed;
  double factor = 1.0;  // mixed = factor * (x1 + x2)
};

/// Pixelwise x1 + x2, rescaled by one global factor when the sum exceeds 1.
MixResult mix_images(const ImagePlane& x1, const ImagePlane& x2);

/// Aligned patch grids of the two RGB sides and the mixed X-ray.
struct TripleDataset {
  PatchGrid r1, r2, x;
  std::size_t size() const { return x.count(); }
};

TripleDataset make_dataset(const ImagePlane& r1, const ImagePlane& r2,
                           const ImagePlane& x, std::size_t patch_size = 64,
                           std::size_t overlap = 56);

struct Batch {
  std::vector<std::size_t> indices;
  Tensor<float> r1, r2, x;  // [B, C, p, p]
};

/// Gather the listed patches of one grid into a [B, C, p, p] tensor.
Tensor<float> gather_patches(const PatchGrid& grid,
                             const std::vector<std::size_t>& indices);

/// Seeded shuffled batching. Every epoch is a fresh permutation drawn from
/// (seed, epoch), so any epoch can be regenerated without replaying earlier
/// ones.
class BatchSampler {
 public:
  BatchSampler(const TripleDataset& data, std::size_t batch_size,
               std::uint64_t seed);

  std::vector<std::size_t> permutation(std::size_t epoch) const;
  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t epoch) const;
  Batch gather(std::vector<std::size_t> indices) const;
  std::size_t batches_per_epoch() const;

 private:
  const TripleDataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

}  // namespace xraysep
