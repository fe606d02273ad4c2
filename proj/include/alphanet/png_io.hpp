#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "alphanet/error.hpp"
#include "alphanet/tensor.hpp"

namespace alphanet {

/// Reads an 8-bit PNG as C x H x W floats in [0, 255]. Grayscale files give
/// one channel, everything else three (alpha is composited away).
inline Tensor<float> read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t c = color ? 3 : 1, h = image.height, w = image.width;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("corrupt PNG " + path.string() + ": " + image.message);
  }
  Tensor<float> out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * h + y) * w + x] = buf[(y * w + x) * c + ch];
  return out;
}

/// Writes a 1- or 3-channel image, rounding and clamping to [0, 255].
inline void write_png(const std::filesystem::path& path, const Tensor<float>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw ShapeError("write_png expects 1 or 3 x H x W, got " + shape_string(img.shape()));
  }
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float v = img[(ch * h + y) * w + x];
        buf[(y * w + x) * c + ch] = static_cast<png_byte>(std::clamp(std::lround(v), 0L, 255L));
      }
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace alphanet
