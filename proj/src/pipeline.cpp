#include "xraysep/pipeline.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace xraysep {
namespace {

std::size_t reflect_index(long i, std::size_t n) {
  // Mirror without repeating the edge pixel: ... 2 1 | 0 1 2 ... n-1 | n-2 ...
  const long last = static_cast<long>(n) - 1;
  if (last == 0) return 0;
  const long period = 2 * last;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m <= last ? m : period - m);
}

std::size_t padded_extent(std::size_t extent, std::size_t patch,
                          std::size_t stride) {
  const std::size_t rem = (extent - patch) % stride;
  return rem == 0 ? extent : extent + (stride - rem);
}

}  // namespace

ImagePlane::ImagePlane(std::size_t channels, std::size_t height,
                       std::size_t width, float fill)
    : pixels_(Shape{channels, height, width}, fill) {}

ImagePlane::ImagePlane(Tensor<float> pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 3) {
    throw std::invalid_argument("ImagePlane: expected [C,H,W], got " +
                                shape_to_string(pixels_.shape()));
  }
}

bool ImagePlane::in_unit_range() const {
  return std::all_of(pixels_.data().begin(), pixels_.data().end(),
                     [](float v) { return v >= 0.0f && v <= 1.0f; });
}

void ImagePlane::require_unit_range(const char* what) const {
  if (!in_unit_range()) {
    throw std::invalid_argument(std::string(what) +
                                ": pixel values outside [0,1]");
  }
}

bool ImagePlane::same_geometry(const ImagePlane& other) const {
  return height() == other.height() && width() == other.width();
}

ImagePlane luminance(const ImagePlane& rgb) {
  if (rgb.channels() != 3) {
    throw std::invalid_argument("luminance: expected 3 channels");
  }
  ImagePlane out(1, rgb.height(), rgb.width());
  for (std::size_t h = 0; h < rgb.height(); ++h) {
    for (std::size_t w = 0; w < rgb.width(); ++w) {
      out.at(0, h, w) = 0.299f * rgb.at(0, h, w) + 0.587f * rgb.at(1, h, w) +
                        0.114f * rgb.at(2, h, w);
    }
  }
  return out;
}

Tensor<float> PatchGrid::patch(std::size_t i) const {
  const std::size_t n = channels * patch_size * patch_size;
  const auto first = patches.data().begin() + static_cast<long>(i * n);
  return Tensor<float>(Shape{channels, patch_size, patch_size},
                       std::vector<float>(first, first + static_cast<long>(n)));
}

bool PatchGrid::same_layout(const PatchGrid& other) const {
  return patch_size == other.patch_size && stride == other.stride &&
         height == other.height && width == other.width &&
         origins == other.origins;
}

std::size_t patches_along(std::size_t extent, std::size_t patch_size,
                          std::size_t stride) {
  if (patch_size > extent || stride == 0) return 0;
  return (padded_extent(extent, patch_size, stride) - patch_size) / stride + 1;
}

PatchGrid extract_patches(const ImagePlane& img, std::size_t patch_size,
                          std::size_t overlap) {
  if (patch_size == 0 || overlap >= patch_size) {
    throw std::invalid_argument("extract_patches: need patch_size > overlap");
  }
  if (patch_size > img.height() || patch_size > img.width()) {
    throw std::invalid_argument(
        "extract_patches: patch " + std::to_string(patch_size) +
        " larger than image " + std::to_string(img.height()) + "x" +
        std::to_string(img.width()));
  }
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.stride = patch_size - overlap;
  grid.channels = img.channels();
  grid.height = img.height();
  grid.width = img.width();
  grid.padded_height = padded_extent(img.height(), patch_size, grid.stride);
  grid.padded_width = padded_extent(img.width(), patch_size, grid.stride);
  const std::size_t rows = (grid.padded_height - patch_size) / grid.stride + 1;
  const std::size_t cols = (grid.padded_width - patch_size) / grid.stride + 1;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      grid.origins.emplace_back(i * grid.stride, j * grid.stride);
    }
  }
  const std::size_t c = grid.channels;
  const std::size_t p = patch_size;
  grid.patches = Tensor<float>(Shape{grid.origins.size(), c, p, p});
  float* dst = grid.patches.raw();
  for (const auto& [row, col] : grid.origins) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < p; ++y) {
        const std::size_t sy = reflect_index(static_cast<long>(row + y), img.height());
        for (std::size_t x = 0; x < p; ++x) {
          const std::size_t sx =
              reflect_index(static_cast<long>(col + x), img.width());
          *dst++ = img.at(ch, sy, sx);
        }
      }
    }
  }
  return grid;
}

ImagePlane stitch_patches(const PatchGrid& grid) {
  const std::size_t c = grid.channels;
  const std::size_t p = grid.patch_size;
  if (grid.patches.shape() != Shape{grid.origins.size(), c, p, p}) {
    throw std::invalid_argument("stitch_patches: patches " +
                                shape_to_string(grid.patches.shape()) +
                                " inconsistent with grid geometry");
  }
  const std::size_t ph = grid.padded_height;
  const std::size_t pw = grid.padded_width;
  std::vector<double> sum(c * ph * pw, 0.0);
  std::vector<std::uint32_t> hits(ph * pw, 0);
  const float* src = grid.patches.raw();
  for (const auto& [row, col] : grid.origins) {
    if (row + p > ph || col + p > pw) {
      throw std::invalid_argument("stitch_patches: origin outside image");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          sum[(ch * ph + row + y) * pw + col + x] += *src++;
        }
      }
    }
    for (std::size_t y = 0; y < p; ++y) {
      for (std::size_t x = 0; x < p; ++x) ++hits[(row + y) * pw + col + x];
    }
  }
  ImagePlane out(c, grid.height, grid.width);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < grid.height; ++y) {
      for (std::size_t x = 0; x < grid.width; ++x) {
        const std::uint32_t n = hits[y * pw + x];
        out.at(ch, y, x) =
            n == 0 ? 0.0f
                   : static_cast<float>(sum[(ch * ph + y) * pw + x] / n);
      }
    }
  }
  return out;
}

MixResult mix_images(const ImagePlane& x1, const ImagePlane& x2) {
  if (x1.channels() != 1 || x2.channels() != 1) {
    throw std::invalid_argument("mix_images: X-ray inputs must be 1-channel");
  }
  if (!x1.same_geometry(x2)) {
    throw std::invalid_argument("mix_images: image sizes differ");
  }
  MixResult result{ImagePlane(1, x1.height(), x1.width()), 1.0};
  const auto a = x1.pixels().data();
  const auto b = x2.pixels().data();
  auto out = result.mixed.pixels().data();
  float peak = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = a[i] + b[i];
    peak = std::max(peak, out[i]);
  }
  if (peak > 1.0f) {
    result.factor = 1.0 / static_cast<double>(peak);
    for (auto& v : out) {
      v = std::min(1.0f, static_cast<float>(v * result.factor));
    }
  }
  return result;
}

TripleDataset make_dataset(const ImagePlane& r1, const ImagePlane& r2,
                           const ImagePlane& x, std::size_t patch_size,
                           std::size_t overlap) {
  if (r1.channels() != 3 || r2.channels() != 3 || x.channels() != 1) {
    throw std::invalid_argument(
        "make_dataset: expected RGB sides and a grayscale X-ray");
  }
  if (!r1.same_geometry(r2) || !r1.same_geometry(x)) {
    throw std::invalid_argument("make_dataset: image sizes differ");
  }
  TripleDataset data{extract_patches(r1, patch_size, overlap),
                     extract_patches(r2, patch_size, overlap),
                     extract_patches(x, patch_size, overlap)};
  return data;
}

Tensor<float> gather_patches(const PatchGrid& grid,
                             const std::vector<std::size_t>& indices) {
  const std::size_t n = grid.channels * grid.patch_size * grid.patch_size;
  Tensor<float> out(
      Shape{indices.size(), grid.channels, grid.patch_size, grid.patch_size});
  float* dst = out.raw();
  for (const std::size_t i : indices) {
    if (i >= grid.count()) {
      throw std::out_of_range("gather_patches: index " + std::to_string(i));
    }
    std::copy_n(grid.patches.raw() + i * n, n, dst);
    dst += n;
  }
  return out;
}

BatchSampler::BatchSampler(const TripleDataset& data, std::size_t batch_size,
                           std::uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  if (!data.r1.same_layout(data.x) || !data.r2.same_layout(data.x)) {
    throw std::invalid_argument("dataset grids are not aligned");
  }
}

std::vector<std::size_t> BatchSampler::permutation(std::size_t epoch) const {
  std::vector<std::size_t> order(data_->size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed_),
                    static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<std::vector<std::size_t>> BatchSampler::epoch_batches(
    std::size_t epoch) const {
  const auto order = permutation(epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size_) {
    const std::size_t end = std::min(order.size(), i + batch_size_);
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(end));
  }
  return out;
}

std::size_t BatchSampler::batches_per_epoch() const {
  return (data_->size() + batch_size_ - 1) / batch_size_;
}

Batch BatchSampler::gather(std::vector<std::size_t> indices) const {
  Batch b;
  b.r1 = gather_patches(data_->r1, indices);
  b.r2 = gather_patches(data_->r2, indices);
  b.x = gather_patches(data_->x, indices);
  b.indices = std::move(indices);
  return b;
}

}  // namespace xraysep
