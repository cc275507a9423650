#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "egic/error.hpp"
#include "egic/tensor.hpp"

namespace egic::io {

/// Writes a 1x3xHxW (or 1x1xHxW) tensor with values in [0,1] as an 8-bit PNG.
template <class T>
void write_png(const std::filesystem::path& path, const Tensor<T>& img) {
  EGIC_REQUIRE(img.n() == 1 && (img.c() == 3 || img.c() == 1), "write_png expects 1x3xHxW or 1x1xHxW");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.w());
  image.height = static_cast<png_uint_32>(img.h());
  image.format = img.c() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(img.h()) * img.w() * img.c());
  for (int y = 0; y < img.h(); ++y)
    for (int x = 0; x < img.w(); ++x)
      for (int c = 0; c < img.c(); ++c) {
        const double v = std::clamp(static_cast<double>(img(0, c, y, x)), 0.0, 1.0);
        buf[(static_cast<std::size_t>(y) * img.w() + x) * img.c() + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw InputError("cannot write PNG " + path.string() + ": " + image.message);
}

/// Reads any PNG as 1x3xHxW RGB with values k/255.
template <class T = float>
Tensor<T> read_png_rgb(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw InputError("cannot read image " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr))
    throw InputError("cannot decode image " + path.string() + ": " + image.message);
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Tensor<T> out(Shape{1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out(0, c, y, x) = static_cast<T>(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0);
  return out;
}

inline void write_label_png(const std::filesystem::path& path, const LabelMap& labels) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(labels.w);
  image.height = static_cast<png_uint_32>(labels.h);
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    EGIC_REQUIRE(labels.data[i] >= 0 && labels.data[i] < 256, "label does not fit in 8 bits");
    buf[i] = static_cast<std::uint8_t>(labels.data[i]);
  }
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw InputError("cannot write PNG " + path.string() + ": " + image.message);
}

inline LabelMap read_label_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw InputError("cannot read label map " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr))
    throw InputError("cannot decode label map " + path.string() + ": " + image.message);
  LabelMap out(static_cast<int>(image.height), static_cast<int>(image.width));
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = buf[i];
  return out;
}

}  // namespace egic::io
