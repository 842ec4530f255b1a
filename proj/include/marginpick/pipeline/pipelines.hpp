#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/data/scene.hpp"
#include "marginpick/image/image.hpp"

namespace mp {

namespace detail {

// Mirror index without repeating the edge sample (..., 2, 1, 0, 1, 2, ...).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (static_cast<std::ptrdiff_t>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

// Plane helpers: a single channel as a row-major H x W array.
struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
  double at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
};

inline Plane get_plane(const Image& img, std::size_t c) {
  Plane p{img.height, img.width, std::vector<double>(img.channel(c), img.channel(c) + img.plane())};
  return p;
}

inline void set_plane(Image& img, std::size_t c, const Plane& p) { std::copy(p.v.begin(), p.v.end(), img.channel(c)); }

inline Plane pad_reflect(const Plane& p, std::size_t h, std::size_t w) {
  Plane out{h, w, std::vector<double>(h * w)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      out.at(y, x) = p.at(reflect_index(static_cast<std::ptrdiff_t>(y), p.h), reflect_index(static_cast<std::ptrdiff_t>(x), p.w));
  return out;
}

// One orthonormal 2-D Haar level on the top-left (h x w) corner, in place:
// LL goes to the top-left quarter, then HL (top-right), LH (bottom-left), HH.
inline void haar_forward(Plane& p, std::size_t h, std::size_t w) {
  std::vector<double> tmp(h * w);
  const std::size_t h2 = h / 2, w2 = w / 2;
  for (std::size_t y = 0; y < h2; ++y) {
    for (std::size_t x = 0; x < w2; ++x) {
      const double a = p.at(2 * y, 2 * x), b = p.at(2 * y, 2 * x + 1);
      const double c = p.at(2 * y + 1, 2 * x), d = p.at(2 * y + 1, 2 * x + 1);
      tmp[y * w + x] = (a + b + c + d) / 2;
      tmp[y * w + x + w2] = (a - b + c - d) / 2;
      tmp[(y + h2) * w + x] = (a + b - c - d) / 2;
      tmp[(y + h2) * w + x + w2] = (a - b - c + d) / 2;
    }
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) p.at(y, x) = tmp[y * w + x];
}

inline void haar_inverse(Plane& p, std::size_t h, std::size_t w) {
  std::vector<double> tmp(h * w);
  const std::size_t h2 = h / 2, w2 = w / 2;
  for (std::size_t y = 0; y < h2; ++y) {
    for (std::size_t x = 0; x < w2; ++x) {
      const double ll = p.at(y, x), hl = p.at(y, x + w2), lh = p.at(y + h2, x), hh = p.at(y + h2, x + w2);
      tmp[2 * y * w + 2 * x] = (ll + hl + lh + hh) / 2;
      tmp[2 * y * w + 2 * x + 1] = (ll - hl + lh - hh) / 2;
      tmp[(2 * y + 1) * w + 2 * x] = (ll + hl - lh - hh) / 2;
      tmp[(2 * y + 1) * w + 2 * x + 1] = (ll - hl - lh + hh) / 2;
    }
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) p.at(y, x) = tmp[y * w + x];
}

inline double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= s;
  return k;
}

inline Plane convolve_separable(const Plane& p, const std::vector<double>& k) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k.size() / 2);
  Plane tmp{p.h, p.w, std::vector<double>(p.v.size())}, out = tmp;
  for (std::size_t y = 0; y < p.h; ++y)
    for (std::size_t x = 0; x < p.w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] * p.at(y, reflect_index(static_cast<std::ptrdiff_t>(x) + i, p.w));
      tmp.at(y, x) = s;
    }
  for (std::size_t y = 0; y < p.h; ++y)
    for (std::size_t x = 0; x < p.w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t i = -r; i <= r; ++i) s += k[i + r] * tmp.at(reflect_index(static_cast<std::ptrdiff_t>(y) + i, p.h), x);
      out.at(y, x) = s;
    }
  return out;
}

}  // namespace detail

inline constexpr std::size_t kHaarLevels = 2;

/// Wavelet shrinkage per channel: 2-level Haar, soft threshold on every
/// detail band with t = strength * median(|HH1|) / 0.6745, inverse, clamp.
/// Odd or non-multiple-of-4 sizes are reflect-padded and cropped back.
inline Image wavelet_denoise(const Image& img, double strength) {
  if (!(strength >= 0.0)) fail(ErrorKind::argument, "denoise strength must be >= 0, got ", strength);
  const std::size_t m = std::size_t{1} << kHaarLevels;
  const std::size_t H = (img.height + m - 1) / m * m, W = (img.width + m - 1) / m * m;
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    auto p = detail::pad_reflect(detail::get_plane(img, c), H, W);
    detail::haar_forward(p, H, W);
    detail::haar_forward(p, H / 2, W / 2);
    std::vector<double> hh1;
    hh1.reserve(H * W / 4);
    for (std::size_t y = H / 2; y < H; ++y)
      for (std::size_t x = W / 2; x < W; ++x) hh1.push_back(std::abs(p.at(y, x)));
    std::nth_element(hh1.begin(), hh1.begin() + static_cast<std::ptrdiff_t>(hh1.size() / 2), hh1.end());
    double med = hh1[hh1.size() / 2];
    if (hh1.size() % 2 == 0) {
      med = (med + *std::max_element(hh1.begin(), hh1.begin() + static_cast<std::ptrdiff_t>(hh1.size() / 2))) / 2;
    }
    const double t = strength * med / 0.6745;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        if (y >= H / 4 || x >= W / 4) p.at(y, x) = detail::soft_threshold(p.at(y, x), t);
    detail::haar_inverse(p, H / 2, W / 2);
    detail::haar_inverse(p, H, W);
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = std::clamp(p.at(y, x), 0.0, 1.0);
  }
  return out;
}

/// Exposed for the perfect-reconstruction check: forward and inverse 2-level
/// Haar on a padded plane, without thresholding or clamping.
inline Image haar_roundtrip(const Image& img) {
  const std::size_t m = std::size_t{1} << kHaarLevels;
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) {
    const std::size_t H = (img.height + m - 1) / m * m, W = (img.width + m - 1) / m * m;
    auto p = detail::pad_reflect(detail::get_plane(img, c), H, W);
    detail::haar_forward(p, H, W);
    detail::haar_forward(p, H / 2, W / 2);
    detail::haar_inverse(p, H / 2, W / 2);
    detail::haar_inverse(p, H, W);
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = p.at(y, x);
  }
  return out;
}

inline Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma > 0.0)) fail(ErrorKind::argument, "blur radius must be > 0, got ", sigma);
  const auto k = detail::gaussian_kernel(sigma);
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c) detail::set_plane(out, c, detail::convolve_separable(detail::get_plane(img, c), k));
  return out;
}

/// out = clamp(img + amount * (img - blur(img, radius))).
inline Image unsharp_sharpen(const Image& img, double amount, double radius = 1.0) {
  if (!(amount >= 0.0)) fail(ErrorKind::argument, "sharpen amount must be >= 0, got ", amount);
  if (amount == 0.0) return img;
  const Image blur = gaussian_blur(img, radius);
  Image out = img;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = std::clamp(img.data[i] + amount * (img.data[i] - blur.data[i]), 0.0, 1.0);
  return out;
}

// Annex K example tables, natural (row-major) order.
inline constexpr std::array<int, 64> kLumaBase = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
inline constexpr std::array<int, 64> kChromaBase = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

inline int quality_scale(int qf) {
  if (qf < 1 || qf > 100) fail(ErrorKind::argument, "JPEG quality must be in [1,100], got ", qf);
  return qf < 50 ? 5000 / qf : 200 - 2 * qf;
}

inline std::array<int, 64> quant_table(const std::array<int, 64>& base, int qf) {
  const int s = quality_scale(qf);
  std::array<int, 64> q{};
  for (std::size_t i = 0; i < 64; ++i) q[i] = std::clamp((base[i] * s + 50) / 100, 1, 255);
  return q;
}

namespace detail {

inline const std::array<double, 64>& dct_matrix() {
  static const std::array<double, 64> m = [] {
    std::array<double, 64> a{};
    for (int k = 0; k < 8; ++k)
      for (int n = 0; n < 8; ++n)
        a[k * 8 + n] = (k == 0 ? std::sqrt(0.125) : 0.5) * std::cos((2 * n + 1) * k * std::numbers::pi / 16.0);
    return a;
  }();
  return m;
}

// In-place 8x8 DCT-II (orthonormal) or its inverse.
inline void dct8x8(std::array<double, 64>& b, bool inverse) {
  const auto& m = dct_matrix();
  std::array<double, 64> t{};
  for (int i = 0; i < 8; ++i)
    for (int k = 0; k < 8; ++k) {
      double s = 0;
      for (int n = 0; n < 8; ++n) s += (inverse ? m[n * 8 + k] : m[k * 8 + n]) * b[i * 8 + n];
      t[i * 8 + k] = s;
    }
  for (int j = 0; j < 8; ++j)
    for (int k = 0; k < 8; ++k) {
      double s = 0;
      for (int n = 0; n < 8; ++n) s += (inverse ? m[n * 8 + k] : m[k * 8 + n]) * t[n * 8 + j];
      b[k * 8 + j] = s;
    }
}

}  // namespace detail

/// Quantization round trip of a baseline JPEG encoder/decoder without entropy
/// coding: BT.601 YCbCr, 4:4:4, 8x8 DCT, scaled Annex K tables; the decoded
/// RGB is rounded to 8 bits. Sizes not divisible by 8 are edge-replicated.
inline Image jpeg_roundtrip(const Image& img, int qf) {
  if (img.channels != 3) fail(ErrorKind::argument, "jpeg_roundtrip needs 3 channels");
  const auto ql = quant_table(kLumaBase, qf), qc = quant_table(kChromaBase, qf);
  const std::size_t H = (img.height + 7) / 8 * 8, W = (img.width + 7) / 8 * 8;
  std::array<std::vector<double>, 3> ycc;
  for (auto& p : ycc) p.assign(H * W, 0.0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t sy = std::min(y, img.height - 1), sx = std::min(x, img.width - 1);
      const double r = 255.0 * img.at(0, sy, sx), g = 255.0 * img.at(1, sy, sx), b = 255.0 * img.at(2, sy, sx);
      ycc[0][y * W + x] = 0.299 * r + 0.587 * g + 0.114 * b;
      ycc[1][y * W + x] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
      ycc[2][y * W + x] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
    }
  }
  std::array<double, 64> block{};
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& q = c == 0 ? ql : qc;
    for (std::size_t by = 0; by < H; by += 8) {
      for (std::size_t bx = 0; bx < W; bx += 8) {
        for (std::size_t i = 0; i < 8; ++i)
          for (std::size_t j = 0; j < 8; ++j) block[i * 8 + j] = ycc[c][(by + i) * W + bx + j] - 128.0;
        detail::dct8x8(block, false);
        for (std::size_t k = 0; k < 64; ++k) block[k] = std::round(block[k] / q[k]) * q[k];
        detail::dct8x8(block, true);
        for (std::size_t i = 0; i < 8; ++i)
          for (std::size_t j = 0; j < 8; ++j) ycc[c][(by + i) * W + bx + j] = block[i * 8 + j] + 128.0;
      }
    }
  }
  Image out(img.height, img.width, 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double Y = ycc[0][y * W + x], cb = ycc[1][y * W + x] - 128.0, cr = ycc[2][y * W + x] - 128.0;
      const double rgb[3] = {Y + 1.402 * cr, Y - 0.344136 * cb - 0.714136 * cr, Y + 1.772 * cb};
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = std::clamp(std::round(rgb[c]), 0.0, 255.0) / 255.0;
    }
  }
  return out;
}

/// One post-processing pipeline. id 0 is the unprocessed source (no stage
/// runs, jpeg_qf 0); grid pipelines have ids 1..20.
struct PipelineSpec {
  std::uint32_t id = 0;
  double denoise_strength = 0.0;
  double sharpen_amount = 0.0;
  double sharpen_radius = 1.0;
  int jpeg_qf = 70;

  bool is_source() const { return id == 0; }

  void validate() const {
    if (is_source()) return;
    if (!(denoise_strength >= 0.0)) fail(ErrorKind::config, "pipeline ", id, ": denoise_strength must be >= 0");
    if (!(sharpen_amount >= 0.0)) fail(ErrorKind::config, "pipeline ", id, ": sharpen_amount must be >= 0");
    if (!(sharpen_radius > 0.0)) fail(ErrorKind::config, "pipeline ", id, ": sharpen_radius must be > 0");
    if (jpeg_qf < 1 || jpeg_qf > 100) fail(ErrorKind::config, "pipeline ", id, ": jpeg_qf must be in [1,100]");
  }

  static PipelineSpec source() { return PipelineSpec{0, 0.0, 0.0, 1.0, 0}; }

  friend bool operator==(const PipelineSpec&, const PipelineSpec&) = default;
};

inline void to_json(nlohmann::json& j, const PipelineSpec& s) {
  j = {{"id", s.id},
       {"denoise_strength", s.denoise_strength},
       {"sharpen_amount", s.sharpen_amount},
       {"sharpen_radius", s.sharpen_radius},
       {"jpeg_qf", s.jpeg_qf}};
}

inline void from_json(const nlohmann::json& j, PipelineSpec& s) {
  s.id = j.at("id").get<std::uint32_t>();
  s.denoise_strength = j.value("denoise_strength", 0.0);
  s.sharpen_amount = j.value("sharpen_amount", 0.0);
  s.sharpen_radius = j.value("sharpen_radius", 1.0);
  s.jpeg_qf = j.value("jpeg_qf", s.id == 0 ? 0 : 70);
}

inline constexpr std::array<double, 5> kGridDenoiseStrengths = {0.0, 0.5, 1.0, 1.5, 2.0};
inline constexpr std::array<double, 4> kGridSharpenAmounts = {0.0, 0.5, 1.0, 1.5};
inline constexpr int kGridQuality = 70;

/// 5 denoise strengths x 4 sharpen amounts, all JPEG 70, ids 1..20 row-major.
inline std::vector<PipelineSpec> pipeline_grid() {
  std::vector<PipelineSpec> grid;
  std::uint32_t id = 1;
  for (double d : kGridDenoiseStrengths)
    for (double s : kGridSharpenAmounts) grid.push_back({id++, d, s, 1.0, kGridQuality});
  return grid;
}

inline Image pipeline_apply(const PipelineSpec& spec, const Image& img) {
  spec.validate();
  if (spec.is_source()) return img;
  Image out = spec.denoise_strength > 0.0 ? wavelet_denoise(img, spec.denoise_strength) : img;
  out = unsharp_sharpen(out, spec.sharpen_amount, spec.sharpen_radius);
  return jpeg_roundtrip(out, spec.jpeg_qf);
}

/// Denoise, then sharpen, then JPEG, on the whole scene; the mask is carried over.
inline SceneImage pipeline_apply(const PipelineSpec& spec, const SceneImage& scene) {
  SceneImage out = scene;
  out.pixels = pipeline_apply(spec, scene.pixels);
  return out;
}

}  // namespace mp
