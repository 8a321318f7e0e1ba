#pragma once

// Minimal PNG output for figures: grayscale images promoted to RGB, boxes,
// a 5x7 digit font, and grid layout.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dair/datasets.hpp"

namespace dair {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// Per-step box colors, cycled by inference step.
inline constexpr std::array<Rgb, 6> step_palette{{
    {230, 25, 75}, {60, 180, 75}, {0, 130, 200}, {255, 225, 25}, {245, 130, 48}, {145, 30, 180}}};

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<Rgb> pixels;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, Rgb fill = {}) : width(w), height(h), pixels(w * h, fill) {}

  /// Values in [0, 1], row-major; each is rounded to 8 bits on all channels.
  static RgbImage from_gray(const std::vector<double>& values, std::size_t w, std::size_t h) {
    if (values.size() != w * h) throw std::invalid_argument("gray image size does not match dimensions");
    RgbImage img(w, h);
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto v = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255.0));
      img.pixels[i] = {v, v, v};
    }
    return img;
  }

  Rgb& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  const Rgb& at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  void set(long x, long y, Rgb c) {
    if (x >= 0 && y >= 0 && static_cast<std::size_t>(x) < width && static_cast<std::size_t>(y) < height) {
      at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = c;
    }
  }
};

/// Outlines the pixel rectangle [x0, x1) x [y0, y1), clipped to the image.
inline void draw_box(RgbImage& img, long x0, long y0, long x1, long y1, Rgb color) {
  if (x1 <= x0 || y1 <= y0) return;
  for (long x = x0; x < x1; ++x) {
    img.set(x, y0, color);
    img.set(x, y1 - 1, color);
  }
  for (long y = y0; y < y1; ++y) {
    img.set(x0, y, color);
    img.set(x1 - 1, y, color);
  }
}

namespace detail {

// Rows top to bottom, bit 4 is the leftmost column.
inline constexpr std::array<std::array<std::uint8_t, 7>, 10> digit_font{{
    {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e},
    {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e},
    {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f},
    {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e},
    {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02},
    {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e},
    {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e},
    {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
    {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e},
    {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c},
}};

}  // namespace detail

/// Draws the decimal digits of `n` with the top-left corner at (x, y).
inline void draw_number(RgbImage& img, long x, long y, std::size_t n, Rgb color) {
  std::string s = std::to_string(n);
  for (char ch : s) {
    const auto& glyph = detail::digit_font[static_cast<std::size_t>(ch - '0')];
    for (long r = 0; r < 7; ++r)
      for (long c = 0; c < 5; ++c)
        if (glyph[static_cast<std::size_t>(r)] & (0x10 >> c)) img.set(x + c, y + r, color);
    x += 6;
  }
}

/// Tiles equally sized images left to right, `cols` per row, each surrounded
/// by `pad` background pixels.
inline RgbImage grid(const std::vector<RgbImage>& tiles, std::size_t cols, std::size_t pad, Rgb background = {40, 40, 40}) {
  if (tiles.empty()) throw std::invalid_argument("grid needs at least one image");
  if (cols == 0) throw std::invalid_argument("grid needs at least one column");
  const std::size_t w = tiles[0].width, h = tiles[0].height;
  for (const auto& t : tiles) {
    if (t.width != w || t.height != h) throw std::invalid_argument("grid images must share dimensions");
  }
  cols = std::min(cols, tiles.size());
  std::size_t rows = (tiles.size() + cols - 1) / cols;
  std::size_t cw = w + 2 * pad, ch = h + 2 * pad;
  RgbImage out(cols * cw, rows * ch, background);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    std::size_t ox = (i % cols) * cw + pad, oy = (i / cols) * ch + pad;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(ox + x, oy + y) = tiles[i].at(x, y);
  }
  return out;
}

namespace detail {

inline void put_u32_be(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void png_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32_be(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_u32_be(out, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace detail

/// 8-bit RGB PNG, no filtering.
inline std::string encode_png(const RgbImage& img) {
  if (img.width == 0 || img.height == 0) throw std::invalid_argument("cannot encode an empty image");
  std::string raw;
  raw.reserve(img.height * (1 + img.width * 3));
  for (std::size_t y = 0; y < img.height; ++y) {
    raw.push_back(0);
    for (std::size_t x = 0; x < img.width; ++x) {
      const Rgb& p = img.at(x, y);
      raw.push_back(static_cast<char>(p.r));
      raw.push_back(static_cast<char>(p.g));
      raw.push_back(static_cast<char>(p.b));
    }
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &len, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("png compression failed");
  }
  packed.resize(len);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", packed);
  detail::png_chunk(out, "IEND", "");
  return out;
}

inline void write_png(const std::string& path, const RgbImage& img) { detail::write_file(path, encode_png(img)); }

}  // namespace dair
