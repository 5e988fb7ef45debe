#include "xraysep/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

namespace xraysep {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_handler(png_structp, png_const_charp message) {
  throw DataError(std::string("png: ") + message);
}

void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace

ImagePlane load_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open " + path.string());
  png_byte signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 ||
      png_sig_cmp(signature, 0, 8) != 0) {
    throw DataError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           png_error_handler,
                                           png_warning_handler);
  if (!png) throw DataError("png: cannot allocate read struct");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};
  if (!info) throw DataError("png: cannot allocate info struct");

  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_byte color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) {
    png_set_strip_alpha(png);
  }
  if (depth == 16) png_set_swap(png);  // host little-endian uint16 rows
  png_read_update_info(png, info);

  const std::size_t width = png_get_image_width(png, info);
  const std::size_t height = png_get_image_height(png, info);
  const std::size_t channels = png_get_channels(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  if (channels != 1 && channels != 3) {
    throw DataError(path.string() + ": unsupported channel count " +
                    std::to_string(channels));
  }
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buffer(row_bytes * height);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = buffer.data() + y * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);

  ImagePlane image(channels, height, width);
  const float max_code = out_depth == 16 ? 65535.0f : 255.0f;
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t k = x * channels + c;
        float code;
        if (out_depth == 16) {
          std::uint16_t v;
          std::memcpy(&v, rows[y] + 2 * k, 2);
          code = v;
        } else {
          code = rows[y][k];
        }
        image.at(c, y, x) = code / max_code;
      }
    }
  }
  return image;
}

void save_png(const std::filesystem::path& path, const ImagePlane& image,
              int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) {
    throw std::invalid_argument("save_png: bit depth must be 8 or 16");
  }
  if (image.channels() != 1 && image.channels() != 3) {
    throw std::invalid_argument("save_png: need 1 or 3 channels");
  }
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            png_error_handler,
                                            png_warning_handler);
  if (!png) throw DataError("png: cannot allocate write struct");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_write_struct(png, info); }
  } guard{&png, &info};
  if (!info) throw DataError("png: cannot allocate info struct");

  const std::size_t channels = image.channels();
  const std::size_t width = image.width();
  const std::size_t height = image.height();
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), bit_depth,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);

  const std::size_t bytes = bit_depth / 8;
  const float max_code = bit_depth == 16 ? 65535.0f : 255.0f;
  std::vector<png_byte> row(width * channels * bytes);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        const auto code = static_cast<std::uint16_t>(std::lround(v * max_code));
        const std::size_t k = x * channels + c;
        if (bit_depth == 16) {
          std::memcpy(row.data() + 2 * k, &code, 2);
        } else {
          row[k] = static_cast<png_byte>(code);
        }
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

}  // namespace xraysep
