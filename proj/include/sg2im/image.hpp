#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "sg2im/scenegraph.hpp"
#include "sg2im/tensor.hpp"

namespace sg2im {

// H x W x C image, interleaved channels, values nominally in [0, 1].
struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.f)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
  bool operator==(const Image&) const = default;
};

// [C, H, W] planar tensor from an interleaved image.
template <typename T>
Tensor<T> to_chw(const Image& img) {
  Tensor<T> t(Shape{img.channels, img.height, img.width});
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        t[(c * img.height + y) * img.width + x] = static_cast<T>(img.at(y, x, c));
  return t;
}

// Image from the n-th item of a [B, C, H, W] tensor.
template <typename T>
Image from_chw(const Tensor<T>& t, std::size_t n = 0) {
  const std::size_t C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Image img(H, W, C);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) img.at(y, x, c) = static_cast<float>(t[((n * C + c) * H + y) * W + x]);
  return img;
}

inline Image clamp01(Image img) {
  for (auto& v : img.data) v = std::clamp(v, 0.f, 1.f);
  return img;
}

// Bilinear resampling (align-corners=false convention).
inline Image resize_bilinear(const Image& src, std::size_t h, std::size_t w) {
  Image out(h, w, src.channels);
  const double sy = static_cast<double>(src.height) / h, sx = static_cast<double>(src.width) / w;
  for (std::size_t y = 0; y < h; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, src.height - 1);
    double wy = fy - y0;
    for (std::size_t x = 0; x < w; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, src.width - 1);
      double wx = fx - x0;
      for (std::size_t c = 0; c < src.channels; ++c) {
        double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                   wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
        out.at(y, x, c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- PNG

inline void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3 && img.channels != 4)
    throw DataError("PNG output supports 1, 3 or 4 channels, got " + std::to_string(img.channels));
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA;
  std::vector<png_byte> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(img.data[i], 0.f, 1.f) * 255.f));
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw DataError("cannot write PNG '" + path.string() + "': " + pi.message);
}

inline Image read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("image file not found: " + path.string());
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str()))
    throw DataError("cannot read PNG '" + path.string() + "': " + pi.message);
  const bool has_color = pi.format & PNG_FORMAT_FLAG_COLOR;
  const bool has_alpha = pi.format & PNG_FORMAT_FLAG_ALPHA;
  pi.format = has_color ? (has_alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB) : PNG_FORMAT_GRAY;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw DataError("cannot decode PNG '" + path.string() + "': " + pi.message);
  }
  Image img(pi.height, pi.width, PNG_IMAGE_SAMPLE_CHANNELS(pi.format));
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.f;
  return img;
}

}  // namespace sg2im
