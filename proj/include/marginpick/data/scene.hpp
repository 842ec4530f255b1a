#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "marginpick/core/error.hpp"
#include "marginpick/core/rng.hpp"
#include "marginpick/image/image.hpp"

namespace mp {

/// Heteroscedastic sensor noise: n ~ Normal(0, a * I + b).
struct NoiseParams {
  double a = 0.0;
  double b = 0.0;
  friend bool operator==(const NoiseParams&, const NoiseParams&) = default;
};

struct SceneImage {
  Image pixels;
  std::uint64_t scene_id = 0;
  Mask tamper_mask;
  NoiseParams noise;
  double mask_ratio() const { return tamper_mask.ratio(); }
};

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// One octave of value noise on a lattice with the given cell size.
inline void add_value_noise(std::vector<double>& field, std::size_t size, double cell, double amplitude, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / cell)) + 2;
  std::vector<double> lattice(n * n);
  for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const std::size_t iy = static_cast<std::size_t>(fy);
    const double ty = smoothstep(fy - static_cast<double>(iy));
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const std::size_t ix = static_cast<std::size_t>(fx);
      const double tx = smoothstep(fx - static_cast<double>(ix));
      const double v00 = lattice[iy * n + ix], v01 = lattice[iy * n + ix + 1];
      const double v10 = lattice[(iy + 1) * n + ix], v11 = lattice[(iy + 1) * n + ix + 1];
      const double top = v00 + (v01 - v00) * tx;
      const double bottom = v10 + (v11 - v10) * tx;
      field[y * size + x] += amplitude * (top + (bottom - top) * ty);
    }
  }
}

inline std::vector<double> multi_octave(std::size_t size, Rng& rng) {
  std::vector<double> field(size * size, 0.0);
  double cell = static_cast<double>(size) / 2.0, amplitude = 1.0;
  while (cell >= 2.0) {
    add_value_noise(field, size, cell, amplitude, rng);
    cell /= 2.0;
    amplitude *= 0.55;
  }
  return field;
}

// 3x3 binomial low-pass [1 2 1]^T [1 2 1] / 16 with edge replication.
inline Image binomial3(const Image& img) {
  Image out = img;
  const std::array<double, 3> k = {0.25, 0.5, 0.25};
  auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            s += k[dy + 1] * k[dx + 1] *
                 img.at(c, clampi(static_cast<std::ptrdiff_t>(y) + dy, img.height),
                        clampi(static_cast<std::ptrdiff_t>(x) + dx, img.width));
          }
        }
        out.at(c, y, x) = s;
      }
    }
  }
  return out;
}

inline void round_to_float(Image& img) {
  for (double& v : img.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace detail

/// Smooth multi-octave content plus sensor noise, clamped to [0,1]. Content and
/// noise come from separate streams keyed by (seed, scene_id), so the same scene
/// rendered with other noise parameters has identical content. Pixel values are
/// rounded to float precision so the scene store round-trips losslessly.
inline SceneImage synth_scene(std::uint64_t scene_id, std::size_t size, NoiseParams noise, std::uint64_t seed) {
  if (size < 4) fail(ErrorKind::argument, "scene size must be at least 4, got ", size);
  if (!(noise.a >= 0.0 && noise.b >= 0.0)) fail(ErrorKind::argument, "noise parameters must be non-negative");
  const std::uint64_t key = hash_combine(substream(seed, "scene"), scene_id);
  Rng content(substream(key, "content"));

  auto luminance = detail::multi_octave(size, content);
  const auto [lo_it, hi_it] = std::minmax_element(luminance.begin(), luminance.end());
  const double lo = *lo_it, span = std::max(*hi_it - lo, 1e-12);
  const double level = content.uniform(0.35, 0.65), contrast = content.uniform(0.35, 0.6);

  SceneImage scene;
  scene.scene_id = scene_id;
  scene.noise = noise;
  scene.pixels = Image(size, size, 3);
  scene.tamper_mask = Mask(size, size);
  for (std::size_t c = 0; c < 3; ++c) {
    auto chroma = detail::multi_octave(size, content);
    const double tint = content.uniform(-0.06, 0.06);
    double* dst = scene.pixels.channel(c);
    for (std::size_t i = 0; i < size * size; ++i) {
      const double l = (luminance[i] - lo) / span - 0.5;
      dst[i] = std::clamp(level + tint + contrast * l + 0.03 * chroma[i], 0.1, 0.9);
    }
  }

  if (noise.a > 0.0 || noise.b > 0.0) {
    Rng rng(substream(key, "noise"));
    for (double& v : scene.pixels.data) v += std::sqrt(noise.a * v + noise.b) * rng.normal();
  }
  scene.pixels.clamp01();
  detail::round_to_float(scene.pixels);
  return scene;
}

/// Star-shaped region with a smooth boundary r(t) = R (1 + sum_k c_k cos(k t + p_k)).
struct SpliceShape {
  double cy = 0.0, cx = 0.0, radius = 0.0;
  std::array<double, 3> coef{}, phase{};

  double boundary(double theta) const {
    double f = 1.0;
    for (std::size_t k = 0; k < coef.size(); ++k) f += coef[k] * std::cos(static_cast<double>(k + 2) * theta + phase[k]);
    return radius * f;
  }
  double max_extent() const {
    double s = 1.0;
    for (double c : coef) s += std::abs(c);
    return radius * s;
  }
  Mask rasterize(std::size_t h, std::size_t w) const {
    Mask m(h, w);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        m.at(y, x) = std::hypot(dy, dx) <= boundary(std::atan2(dy, dx));
      }
    }
    return m;
  }
};

/// Pastes a smooth region of `donor` into `host`. The donor should be rendered
/// with different noise; it is additionally low-passed, so the forged region
/// carries different noise statistics. The mask ratio lands within 20% of the
/// target; pixels outside the region are untouched.
inline SceneImage apply_splice(const SceneImage& host, const SceneImage& donor, double target_ratio,
                               std::uint64_t seed) {
  expect_same_size(host.pixels, donor.pixels, "apply_splice");
  if (!(target_ratio > 0.0 && target_ratio <= 0.5)) {
    fail(ErrorKind::argument, "splice ratio must be in (0, 0.5], got ", target_ratio);
  }
  const std::size_t H = host.pixels.height, W = host.pixels.width;
  Rng rng(hash_combine(substream(seed, "splice"), host.scene_id));
  SpliceShape shape;
  for (std::size_t k = 0; k < shape.coef.size(); ++k) {
    shape.coef[k] = rng.uniform(0.0, 0.12);
    shape.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const double area = target_ratio * static_cast<double>(H * W);
  shape.radius = std::sqrt(area / std::numbers::pi);
  const double half = 0.5 * static_cast<double>(std::min(H, W));
  if (shape.max_extent() >= half) {
    fail(ErrorKind::data, "cannot place a region of ratio ", target_ratio, " in a ", H, "x", W, " scene");
  }
  const double ext = shape.max_extent();
  shape.cy = rng.uniform(ext, static_cast<double>(H) - ext);
  shape.cx = rng.uniform(ext, static_cast<double>(W) - ext);

  Mask region;
  for (int iter = 0; iter < 8; ++iter) {
    region = shape.rasterize(H, W);
    const double got = region.ratio();
    if (got > 0.0 && std::abs(got / target_ratio - 1.0) < 0.05) break;
    shape.radius *= std::sqrt(target_ratio / std::max(got, 1e-9));
    if (shape.max_extent() >= half) break;
    const double e = shape.max_extent();
    shape.cy = std::clamp(shape.cy, e, static_cast<double>(H) - e);
    shape.cx = std::clamp(shape.cx, e, static_cast<double>(W) - e);
  }
  const double got = region.ratio();
  if (!(got >= 0.8 * target_ratio && got <= 1.2 * target_ratio)) {
    fail(ErrorKind::data, "cannot place a region of ratio ", target_ratio, " (got ", got, ")");
  }

  const Image smooth = detail::binomial3(donor.pixels);
  SceneImage out = host;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (!region.at(y, x)) continue;
      out.tamper_mask.at(y, x) = 1;
      for (std::size_t c = 0; c < 3; ++c) out.pixels.at(c, y, x) = static_cast<double>(static_cast<float>(smooth.at(c, y, x)));
    }
  }
  return out;
}

/// 3x3 high-pass residual (pixel minus 8-neighbour mean) of one channel,
/// interior pixels only; border residuals are 0.
inline Image highpass_residual(const Image& img) {
  Image out(img.height, img.width, img.channels, 0.0);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 1; y + 1 < img.height; ++y) {
      for (std::size_t x = 1; x + 1 < img.width; ++x) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            if (dy || dx) s += img.at(c, y + dy, x + dx);
        out.at(c, y, x) = img.at(c, y, x) - s / 8.0;
      }
    }
  }
  return out;
}

}  // namespace mp
