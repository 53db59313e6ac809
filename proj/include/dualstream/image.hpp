#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "dualstream/fsutil.hpp"

namespace dualstream {

/// 8-bit interleaved RGB image, row-major.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

/// Single-channel float image, row-major.
struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<float> data;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, float fill = 0.f) : width(w), height(h), data(w * h, fill) {}

  float& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
  float at(std::size_t x, std::size_t y) const { return data[y * width + x]; }
};

inline std::uint8_t saturate_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

inline GrayImage to_luma(const Image& img) {
  GrayImage g(img.width, img.height);
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    const auto* p = &img.pixels[i * 3];
    g.data[i] = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
  }
  return g;
}

namespace detail {

// Source coordinate for output index `i` with half-pixel centres (align_corners = false).
struct LinearTap {
  std::size_t i0, i1;
  float w1;
};

inline std::vector<LinearTap> linear_taps(std::size_t src, std::size_t dst) {
  std::vector<LinearTap> taps(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, src - 1);
    taps[i] = {i0, i1, static_cast<float>(s - static_cast<double>(i0))};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize with half-pixel centres and edge clamping.
inline Image resize_bilinear(const Image& src, std::size_t w, std::size_t h) {
  if (src.width == w && src.height == h) return src;
  Image out(w, h);
  const auto tx = detail::linear_taps(src.width, w);
  const auto ty = detail::linear_taps(src.height, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float a = src.at(tx[x].i0, ty[y].i0, c), b = src.at(tx[x].i1, ty[y].i0, c);
        const float d = src.at(tx[x].i0, ty[y].i1, c), e = src.at(tx[x].i1, ty[y].i1, c);
        const float top = a + (b - a) * tx[x].w1, bottom = d + (e - d) * tx[x].w1;
        out.at(x, y, c) = saturate_u8(top + (bottom - top) * ty[y].w1);
      }
  return out;
}

inline GrayImage resize_bilinear(const GrayImage& src, std::size_t w, std::size_t h) {
  if (src.width == w && src.height == h) return src;
  GrayImage out(w, h);
  const auto tx = detail::linear_taps(src.width, w);
  const auto ty = detail::linear_taps(src.height, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const float a = src.at(tx[x].i0, ty[y].i0), b = src.at(tx[x].i1, ty[y].i0);
      const float d = src.at(tx[x].i0, ty[y].i1), e = src.at(tx[x].i1, ty[y].i1);
      const float top = a + (b - a) * tx[x].w1, bottom = d + (e - d) * tx[x].w1;
      out.at(x, y) = top + (bottom - top) * ty[y].w1;
    }
  return out;
}

// ---------------------------------------------------------------------------
// PNG (libpng simplified API) and binary PPM

inline Image decode_png(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    fail(ErrorCode::IoError, origin + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  Image out(img.width, img.height);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorCode::IoError, origin + ": " + msg);
  }
  return out;
}

inline std::string encode_png(const Image& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
    fail(ErrorCode::IoError, std::string("png encode: ") + img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
    fail(ErrorCode::IoError, std::string("png encode: ") + img.message);
  out.resize(size);
  return out;
}

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  std::size_t pos = 0;
  auto token = [&]() {
    std::string t;
    while (pos < bytes.size()) {
      const char c = static_cast<char>(bytes[pos]);
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        ++pos;
      } else {
        t += c;
        ++pos;
      }
    }
    return t;
  };
  if (token() != "P6") fail(ErrorCode::IoError, origin + ": not a binary PPM");
  const long w = std::strtol(token().c_str(), nullptr, 10);
  const long h = std::strtol(token().c_str(), nullptr, 10);
  const long maxval = std::strtol(token().c_str(), nullptr, 10);
  ++pos;  // single whitespace before the raster
  if (w <= 0 || h <= 0 || maxval != 255) fail(ErrorCode::IoError, origin + ": unsupported PPM header");
  Image out(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
  if (bytes.size() < pos + out.pixels.size()) fail(ErrorCode::IoError, origin + ": truncated PPM");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), out.pixels.size(), out.pixels.begin());
  return out;
}

inline std::string encode_ppm(const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

/// Reads a PNG or binary PPM, chosen by file extension.
inline Image read_image(const fs::path& path) {
  auto bytes = read_file(path);
  const auto ext = path.extension().string();
  if (ext == ".ppm") return decode_ppm(bytes, path.string());
  return decode_png(bytes, path.string());
}

inline void write_image(const fs::path& path, const Image& image) {
  atomic_write(path, path.extension() == ".ppm" ? encode_ppm(image) : encode_png(image));
}

}  // namespace dualstream
