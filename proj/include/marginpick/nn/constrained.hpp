#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "marginpick/core/rng.hpp"
#include "marginpick/tensor/tensor.hpp"

// High-pass constraint of the first detector layer: for every filter and input
// channel slice of an odd k x k kernel, the centre weight is -1 and the other
// weights sum to 1.

namespace mp {

struct ConstraintResidual {
  double center = 0.0;    // max |w(centre) + 1|
  double off_sum = 0.0;   // max |sum_{off-centre} w - 1|
  double max() const { return center > off_sum ? center : off_sum; }
};

namespace detail {

inline void expect_square_odd_kernel(const Shape& s) {
  if (s.size() != 4 || s[2] != s[3] || s[2] % 2 == 0) {
    fail(ErrorKind::shape, "constrained kernel must be (O,C,k,k) with odd k, got ", to_string(s));
  }
}

}  // namespace detail

template <typename T>
ConstraintResidual constraint_residual(const Tensor<T>& kernel) {
  detail::expect_square_odd_kernel(kernel.shape());
  const std::size_t k = kernel.dim(2), area = k * k, center = (k / 2) * k + k / 2;
  const std::size_t slices = kernel.dim(0) * kernel.dim(1);
  ConstraintResidual r;
  for (std::size_t s = 0; s < slices; ++s) {
    const T* w = kernel.ptr() + s * area;
    double sum = 0.0;
    for (std::size_t i = 0; i < area; ++i) {
      if (i != center) sum += w[i];
    }
    r.center = std::max(r.center, std::abs(static_cast<double>(w[center]) + 1.0));
    r.off_sum = std::max(r.off_sum, std::abs(sum - 1.0));
  }
  return r;
}

/// Projects one slice in place. Returns false (leaving it untouched) when the
/// off-centre sum is too close to zero to rescale.
template <typename T>
bool project_slice(std::span<T> w, std::size_t center) {
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i != center) sum += w[i];
  }
  if (std::abs(sum) < 1e-12) return false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = i == center ? T{-1} : static_cast<T>(w[i] / sum);
  }
  return true;
}

/// Off-centre entries divided by their sum, centre set to -1, per slice.
/// Throws a numeric error for a slice whose off-centre sum vanishes; the
/// caller re-initializes that filter.
template <typename T>
Tensor<T> constrained_conv_project(const Tensor<T>& kernel) {
  detail::expect_square_odd_kernel(kernel.shape());
  Tensor<T> out = kernel;
  const std::size_t k = kernel.dim(2), area = k * k, center = (k / 2) * k + k / 2;
  const std::size_t slices = kernel.dim(0) * kernel.dim(1);
  for (std::size_t s = 0; s < slices; ++s) {
    if (!project_slice(out.data().subspan(s * area, area), center)) {
      fail(ErrorKind::numeric, "constrained kernel slice ", s, " (filter ", s / kernel.dim(1),
           ") is not projectable: off-centre weights sum to ~0");
    }
  }
  return out;
}

/// Projects every slice, redrawing degenerate ones from U(-bound, bound)
/// until they can be projected. Returns the number of redrawn slices.
template <typename T>
std::size_t project_or_reinitialize(Tensor<T>& kernel, double bound, Rng& rng) {
  detail::expect_square_odd_kernel(kernel.shape());
  const std::size_t k = kernel.dim(2), area = k * k, center = (k / 2) * k + k / 2;
  const std::size_t slices = kernel.dim(0) * kernel.dim(1);
  std::size_t redrawn = 0;
  for (std::size_t s = 0; s < slices; ++s) {
    auto w = kernel.data().subspan(s * area, area);
    while (!project_slice(w, center)) {
      for (T& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
      ++redrawn;
    }
  }
  return redrawn;
}

}  // namespace mp
