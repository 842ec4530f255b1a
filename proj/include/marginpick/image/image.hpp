#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "marginpick/core/error.hpp"
#include "marginpick/core/io.hpp"

namespace mp {

/// Channel-planar image, values nominally in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<double> data;  // c * H * W + y * W + x

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 3, double fill = 0.0)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::size_t plane() const { return height * width; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return data[c * plane() + y * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return data[c * plane() + y * width + x]; }
  double* channel(std::size_t c) { return data.data() + c * plane(); }
  const double* channel(std::size_t c) const { return data.data() + c * plane(); }

  void clamp01() {
    for (double& v : data) v = std::clamp(v, 0.0, 1.0);
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary H x W mask.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), data(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  double ratio() const {
    if (data.empty()) return 0.0;
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return static_cast<double>(n) / static_cast<double>(data.size());
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

inline void expect_same_size(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels) {
    fail(ErrorKind::shape, what, ": image sizes differ (", a.height, "x", a.width, "x", a.channels, " vs ",
         b.height, "x", b.width, "x", b.channels, ")");
  }
}

inline double psnr(const Image& a, const Image& b) {
  expect_same_size(a, b, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// Portable float map (PF, 3 channels / Pf, 1 channel). Little-endian (negative
// scale), rows stored bottom to top. Values are stored as 32-bit floats, so a
// round trip is exact for images produced at float precision.
inline std::string encode_pfm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) fail(ErrorKind::argument, "PFM holds 1 or 3 channels");
  io::Writer w;
  const std::string header = cat(img.channels == 3 ? "PF" : "Pf", "\n", img.width, " ", img.height, "\n-1.0\n");
  w.put_bytes(header.data(), header.size());
  for (std::size_t row = img.height; row-- > 0;) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) w.put(static_cast<float>(img.at(c, row, x)));
    }
  }
  return std::move(w.buffer());
}

inline Image decode_pfm(const std::string& bytes, const std::string& what = "pfm") {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t width = 0, height = 0;
  double scale = 0.0;
  in >> magic >> width >> height >> scale;
  if (!in || (magic != "PF" && magic != "Pf") || width == 0 || height == 0) {
    fail(ErrorKind::data, what, ": not a PFM file");
  }
  if (scale >= 0.0) fail(ErrorKind::data, what, ": big-endian PFM is not supported");
  in.get();
  const std::size_t channels = magic == "PF" ? 3 : 1;
  io::Reader r(std::string_view(bytes).substr(static_cast<std::size_t>(in.tellg())), what);
  Image img(height, width, channels);
  for (std::size_t row = height; row-- > 0;) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) img.at(c, row, x) = r.get<float>();
    }
  }
  return img;
}

// Binary PGM (P5) for masks: 0 or 255.
inline std::string encode_pgm(const Mask& m) {
  std::string out = cat("P5\n", m.width, " ", m.height, "\n255\n");
  for (auto v : m.data) out.push_back(static_cast<char>(v ? 255 : 0));
  return out;
}

inline Mask decode_pgm(const std::string& bytes, const std::string& what = "pgm") {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || magic != "P5" || maxval != 255) fail(ErrorKind::data, what, ": not an 8-bit P5 file");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < offset + width * height) fail(ErrorKind::data, what, ": truncated");
  Mask m(height, width);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = bytes[offset + i] != 0;
  return m;
}

}  // namespace mp
