#pragma once

// Multi-object scene datasets: the procedural Multi-Sprites generator, the
// Multi-MNIST composer over IDX digit files, and the DAIR container.
//
// DAIR layout (all integers little-endian):
//   "DAIR" | version u32 = 1 | count | height | width | max_objects | num_categories
//   per record: n u8, n x (category u8, center_x f32, center_y f32, scale f32,
//   orientation f32), then height * width image bytes.
//
// Object centers are in continuous pixel coordinates: pixel (row i, col j)
// covers [j, j + 1) x [i, i + 1), so its centre sits at (j + 0.5, i + 0.5).

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "dair/rng.hpp"

namespace dair {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneObject {
  std::uint8_t category = 0;
  float center_x = 0, center_y = 0;
  float scale = 0;
  float orientation = 0;

  bool operator==(const SceneObject&) const = default;
};

struct SceneRecord {
  std::vector<std::uint8_t> image;  // height * width, row-major
  std::vector<SceneObject> objects;

  bool operator==(const SceneRecord&) const = default;
};

struct DatasetHeader {
  static constexpr std::array<char, 4> magic{'D', 'A', 'I', 'R'};
  static constexpr std::uint32_t current_version = 1;
  static constexpr std::size_t byte_size = 28;

  std::uint32_t version = current_version;
  std::uint32_t count = 0;
  std::uint32_t height = 0, width = 0;
  std::uint32_t max_objects = 0;
  std::uint32_t num_categories = 0;

  bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<SceneRecord> records;
};

// ---------------------------------------------------------------- byte I/O

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " reading " + field + " (need " +
                        std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
    }
  }

  std::uint8_t u8(const char* field) {
    need(1, field);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }

  std::uint32_t u32_le(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint32_t u32_be(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<std::uint8_t>(bytes_[pos_ + i]);
    pos_ += 4;
    return v;
  }

  float f32_le(const char* field) { return std::bit_cast<float>(u32_le(field)); }

  const char* take(std::size_t n, const char* field) {
    need(n, field);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  [[noreturn]] void fail(std::size_t at, const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at byte " + std::to_string(at));
  }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// Reads a whole file; gzip-compressed files are inflated transparently.
inline std::string slurp(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string out;
  std::array<char, 1 << 16> buf;
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.append(buf.data(), static_cast<std::size_t>(n));
  int err = 0;
  const char* msg = gzerror(f, &err);
  std::string error = err < 0 ? msg : "";
  gzclose(f);
  if (n < 0 || !error.empty()) throw std::runtime_error("read error in " + path + ": " + error);
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace detail

// ---------------------------------------------------------------- IDX

struct IdxArray {
  std::vector<std::uint32_t> shape;
  std::vector<std::uint8_t> data;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

/// Parses unsigned-byte IDX content: 00 00 08 rank, rank big-endian u32 dims, data.
inline IdxArray parse_idx(const std::string& bytes, const std::string& what = "idx") {
  detail::ByteReader r(bytes, what);
  r.need(4, "magic");
  std::uint8_t z0 = r.u8("magic"), z1 = r.u8("magic"), type = r.u8("magic"), rank = r.u8("magic");
  if (z0 != 0 || z1 != 0) r.fail(0, "bad magic, expected two zero bytes");
  if (type != 0x08) r.fail(2, "unsupported element type 0x" + std::to_string(type) + ", expected 0x08");
  if (rank == 0) r.fail(3, "rank must be >= 1");
  IdxArray out;
  for (std::uint8_t i = 0; i < rank; ++i) out.shape.push_back(r.u32_be("dimension"));
  std::size_t n = out.numel();
  std::size_t at = r.offset();
  if (r.remaining() < n) {
    r.fail(at, "payload truncated: need " + std::to_string(n) + " bytes, have " + std::to_string(r.remaining()));
  }
  const char* p = r.take(n, "payload");
  out.data.assign(reinterpret_cast<const std::uint8_t*>(p), reinterpret_cast<const std::uint8_t*>(p) + n);
  if (r.remaining() != 0) r.fail(r.offset(), std::to_string(r.remaining()) + " trailing bytes after payload");
  return out;
}

inline IdxArray read_idx(const std::string& path) { return parse_idx(detail::slurp(path), path); }

// ---------------------------------------------------------------- DAIR container

inline std::string encode_dataset(const Dataset& ds) {
  const auto& h = ds.header;
  if (h.count != ds.records.size()) throw std::invalid_argument("header count does not match record count");
  std::size_t pixels = std::size_t(h.height) * h.width;
  std::string out(DatasetHeader::magic.begin(), DatasetHeader::magic.end());
  for (std::uint32_t v : {h.version, h.count, h.height, h.width, h.max_objects, h.num_categories}) {
    detail::put_u32(out, v);
  }
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    if (rec.image.size() != pixels) throw std::invalid_argument("record " + std::to_string(i) + " has wrong image size");
    if (rec.objects.size() > h.max_objects || rec.objects.size() > 255) {
      throw std::invalid_argument("record " + std::to_string(i) + " exceeds max_objects");
    }
    out.push_back(static_cast<char>(rec.objects.size()));
    for (const auto& o : rec.objects) {
      if (o.category >= h.num_categories) throw std::invalid_argument("record " + std::to_string(i) + " has a category out of range");
      out.push_back(static_cast<char>(o.category));
      detail::put_f32(out, o.center_x);
      detail::put_f32(out, o.center_y);
      detail::put_f32(out, o.scale);
      detail::put_f32(out, o.orientation);
    }
    out.append(reinterpret_cast<const char*>(rec.image.data()), rec.image.size());
  }
  return out;
}

inline Dataset decode_dataset(const std::string& bytes, const std::string& what = "dataset") {
  detail::ByteReader r(bytes, what);
  const char* m = r.take(4, "magic");
  if (std::memcmp(m, DatasetHeader::magic.data(), 4) != 0) r.fail(0, "bad magic, expected \"DAIR\"");
  Dataset ds;
  auto& h = ds.header;
  h.version = r.u32_le("version");
  if (h.version != DatasetHeader::current_version) r.fail(4, "unsupported version " + std::to_string(h.version));
  h.count = r.u32_le("count");
  h.height = r.u32_le("height");
  h.width = r.u32_le("width");
  h.max_objects = r.u32_le("max_objects");
  h.num_categories = r.u32_le("num_categories");
  std::size_t pixels = std::size_t(h.height) * h.width;
  ds.records.reserve(h.count);
  for (std::uint32_t i = 0; i < h.count; ++i) {
    SceneRecord rec;
    std::size_t at = r.offset();
    std::uint8_t n = r.u8("object count");
    if (n > h.max_objects) r.fail(at, "record " + std::to_string(i) + " has " + std::to_string(n) + " objects, max " + std::to_string(h.max_objects));
    for (std::uint8_t j = 0; j < n; ++j) {
      SceneObject o;
      o.category = r.u8("category");
      o.center_x = r.f32_le("center_x");
      o.center_y = r.f32_le("center_y");
      o.scale = r.f32_le("scale");
      o.orientation = r.f32_le("orientation");
      rec.objects.push_back(o);
    }
    const char* p = r.take(pixels, "image");
    rec.image.assign(reinterpret_cast<const std::uint8_t*>(p), reinterpret_cast<const std::uint8_t*>(p) + pixels);
    ds.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) r.fail(r.offset(), std::to_string(r.remaining()) + " trailing bytes");
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& path) { detail::write_file(path, encode_dataset(ds)); }

inline Dataset read_dataset(const std::string& path) { return decode_dataset(detail::slurp(path), path); }

// ---------------------------------------------------------------- Multi-Sprites

enum class SpriteShape : std::uint8_t { square = 0, triangle = 1, ellipse = 2 };

inline const char* sprite_name(std::size_t category) {
  static constexpr const char* names[] = {"square", "triangle", "ellipse"};
  return category < 3 ? names[category] : "?";
}

struct SpriteConfig {
  std::uint32_t height = 64, width = 64;
  std::uint32_t max_objects = 3;
  double min_scale = 0.2, max_scale = 0.45;
  double ellipse_aspect = 0.6;
  int supersample = 4;

  void validate() const {
    if (height < 8 || width < 8) throw std::invalid_argument("sprite canvas must be at least 8x8");
    if (max_objects > 255) throw std::invalid_argument("max_objects must be <= 255");
    if (!(min_scale > 0 && min_scale <= max_scale && max_scale <= 1)) throw std::invalid_argument("need 0 < min_scale <= max_scale <= 1");
    if (!(ellipse_aspect > 0 && ellipse_aspect <= 1)) throw std::invalid_argument("ellipse_aspect must lie in (0, 1]");
    if (supersample < 1) throw std::invalid_argument("supersample must be >= 1");
  }
};

/// A filled shape in continuous pixel coordinates; `size` is the square and
/// triangle side or the ellipse semi-major axis.
struct Sprite {
  SpriteShape shape;
  double cx, cy, size, angle, aspect = 0.6;

  /// Triangle vertices around the centroid in the unrotated frame, apex up.
  std::vector<std::array<double, 2>> triangle_vertices() const {
    double r = size / std::sqrt(3.0);
    std::vector<std::array<double, 2>> v;
    for (int i = 0; i < 3; ++i) {
      double a = -std::numbers::pi / 2 + 2 * std::numbers::pi * i / 3;
      v.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return v;
  }

  /// Half-extents of the axis-aligned bounding box after rotation.
  std::array<double, 2> half_extent() const {
    double c = std::abs(std::cos(angle)), s = std::abs(std::sin(angle));
    switch (shape) {
      case SpriteShape::square: {
        double h = size / 2;
        return {h * (c + s), h * (c + s)};
      }
      case SpriteShape::ellipse: {
        double a = size, b = size * aspect;
        return {std::sqrt(a * a * c * c + b * b * s * s), std::sqrt(a * a * s * s + b * b * c * c)};
      }
      case SpriteShape::triangle: {
        double hx = 0, hy = 0;
        double ca = std::cos(angle), sa = std::sin(angle);
        for (auto [u, v] : triangle_vertices()) {
          hx = std::max(hx, std::abs(ca * u - sa * v));
          hy = std::max(hy, std::abs(sa * u + ca * v));
        }
        return {hx, hy};
      }
    }
    return {0, 0};
  }

  bool contains(double px, double py) const {
    double dx = px - cx, dy = py - cy;
    double ca = std::cos(angle), sa = std::sin(angle);
    double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
    switch (shape) {
      case SpriteShape::square: return std::abs(u) <= size / 2 && std::abs(v) <= size / 2;
      case SpriteShape::ellipse: {
        double a = size, b = size * aspect;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
      }
      case SpriteShape::triangle: {
        auto t = triangle_vertices();
        auto edge = [&](int i, int j) {
          return (t[j][0] - t[i][0]) * (v - t[i][1]) - (t[j][1] - t[i][1]) * (u - t[i][0]);
        };
        double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      }
    }
    return false;
  }
};

/// Rasterizes one sprite with ss x ss supersampling and max-composites it
/// into `image` at intensity round(255 * coverage).
inline void rasterize_max(const Sprite& sp, std::vector<std::uint8_t>& image, std::uint32_t height, std::uint32_t width,
                          int ss) {
  auto [hx, hy] = sp.half_extent();
  int x0 = std::max(0, static_cast<int>(std::floor(sp.cx - hx)) - 1);
  int x1 = std::min(static_cast<int>(width) - 1, static_cast<int>(std::ceil(sp.cx + hx)) + 1);
  int y0 = std::max(0, static_cast<int>(std::floor(sp.cy - hy)) - 1);
  int y1 = std::min(static_cast<int>(height) - 1, static_cast<int>(std::ceil(sp.cy + hy)) + 1);
  for (int i = y0; i <= y1; ++i) {
    for (int j = x0; j <= x1; ++j) {
      int hits = 0;
      for (int a = 0; a < ss; ++a)
        for (int b = 0; b < ss; ++b) hits += sp.contains(j + (b + 0.5) / ss, i + (a + 0.5) / ss);
      auto v = static_cast<std::uint8_t>(std::lround(255.0 * hits / (ss * ss)));
      auto& px = image[static_cast<std::size_t>(i) * width + static_cast<std::size_t>(j)];
      px = std::max(px, v);
    }
  }
}

/// Record `index` of the Multi-Sprites dataset for `seed`; records are
/// independent of each other.
inline SceneRecord make_sprite_record(const SpriteConfig& cfg, std::uint64_t seed, std::uint64_t index) {
  NoiseStream rng(seed, 0x737072697465ULL, index);
  SceneRecord rec;
  rec.image.assign(std::size_t(cfg.height) * cfg.width, 0);
  auto n = rng.below(cfg.max_objects + 1);
  double extent = std::min(cfg.height, cfg.width);
  for (std::uint64_t k = 0; k < n; ++k) {
    Sprite sp{};
    sp.shape = static_cast<SpriteShape>(rng.below(3));
    double scale = rng.uniform(cfg.min_scale, cfg.max_scale);
    sp.angle = rng.uniform(0.0, 2 * std::numbers::pi);
    sp.aspect = cfg.ellipse_aspect;
    sp.size = sp.shape == SpriteShape::ellipse ? scale * extent / 2 : scale * extent;
    auto [hx, hy] = sp.half_extent();
    sp.cx = rng.uniform(hx, cfg.width - hx);
    sp.cy = rng.uniform(hy, cfg.height - hy);
    rasterize_max(sp, rec.image, cfg.height, cfg.width, cfg.supersample);
    rec.objects.push_back({static_cast<std::uint8_t>(sp.shape), static_cast<float>(sp.cx), static_cast<float>(sp.cy),
                           static_cast<float>(scale), static_cast<float>(sp.angle)});
  }
  return rec;
}

inline Dataset gen_multi_sprites(std::uint32_t count, std::uint64_t seed, const SpriteConfig& cfg = {}) {
  cfg.validate();
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  Dataset ds;
  ds.header = {DatasetHeader::current_version, count, cfg.height, cfg.width, cfg.max_objects, 3};
  ds.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) ds.records.push_back(make_sprite_record(cfg, seed, i));
  return ds;
}

// ---------------------------------------------------------------- Multi-MNIST

struct MnistSource {
  std::uint32_t digit_h = 0, digit_w = 0;
  std::vector<std::uint8_t> images;  // count * digit_h * digit_w
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }

  static MnistSource from_idx(const IdxArray& images, const IdxArray& labels) {
    if (images.shape.size() != 3) throw FormatError("digit images must be a rank-3 IDX array");
    if (labels.shape.size() != 1) throw FormatError("digit labels must be a rank-1 IDX array");
    if (images.shape[0] != labels.shape[0]) {
      throw FormatError("digit images (" + std::to_string(images.shape[0]) + ") and labels (" +
                        std::to_string(labels.shape[0]) + ") disagree on item count");
    }
    if (images.shape[0] == 0) throw FormatError("digit source is empty");
    for (auto l : labels.data) {
      if (l > 9) throw FormatError("digit label " + std::to_string(l) + " out of range");
    }
    return {images.shape[1], images.shape[2], images.data, labels.data};
  }

  static MnistSource load(const std::string& images_path, const std::string& labels_path) {
    return from_idx(read_idx(images_path), read_idx(labels_path));
  }
};

struct MnistConfig {
  std::uint32_t height = 50, width = 50;
  std::uint32_t max_digits = 2;
};

inline SceneRecord make_mnist_record(const MnistSource& src, const MnistConfig& cfg, std::uint64_t seed,
                                     std::uint64_t index) {
  NoiseStream rng(seed, 0x6d6e697374ULL, index);
  SceneRecord rec;
  rec.image.assign(std::size_t(cfg.height) * cfg.width, 0);
  auto n = rng.below(cfg.max_digits + 1);
  const std::uint32_t dh = src.digit_h, dw = src.digit_w;
  for (std::uint64_t k = 0; k < n; ++k) {
    auto item = rng.below(src.size());
    auto ox = static_cast<std::uint32_t>(rng.below(cfg.width - dw + 1));
    auto oy = static_cast<std::uint32_t>(rng.below(cfg.height - dh + 1));
    const std::uint8_t* digit = src.images.data() + item * dh * dw;
    for (std::uint32_t i = 0; i < dh; ++i) {
      for (std::uint32_t j = 0; j < dw; ++j) {
        auto& px = rec.image[std::size_t(oy + i) * cfg.width + ox + j];
        px = std::max(px, digit[i * dw + j]);
      }
    }
    float scale = static_cast<float>(std::max(dh, dw)) / static_cast<float>(std::min(cfg.height, cfg.width));
    rec.objects.push_back({src.labels[item], static_cast<float>(ox + dw / 2.0), static_cast<float>(oy + dh / 2.0),
                           scale, 0.0f});
  }
  return rec;
}

inline Dataset gen_multi_mnist(std::uint32_t count, const MnistSource& src, std::uint64_t seed,
                               const MnistConfig& cfg = {}) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  if (src.digit_h > cfg.height || src.digit_w > cfg.width) throw std::invalid_argument("digits larger than the canvas");
  if (cfg.max_digits > 255) throw std::invalid_argument("max_digits must be <= 255");
  Dataset ds;
  ds.header = {DatasetHeader::current_version, count, cfg.height, cfg.width, cfg.max_digits, 10};
  ds.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) ds.records.push_back(make_mnist_record(src, cfg, seed, i));
  return ds;
}

}  // namespace dair
