#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "marginpick/core/error.hpp"

namespace mp::stats {

/// Type-7 quantile (linear interpolation between order statistics) of
/// already sorted data.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) fail(ErrorKind::argument, "quantile of an empty set");
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::argument, "quantile level must be in [0,1], got ", p);
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, p);
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

inline double mean(std::span<const double> v) {
  if (v.empty()) fail(ErrorKind::argument, "mean of an empty set");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Population variance, two-pass.
inline double variance(std::span<const double> v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); 0 for fewer than two values.
inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  return std::sqrt(variance(v) * static_cast<double>(v.size()) / static_cast<double>(v.size() - 1));
}

/// Five-number summary with Tukey fences: the fences are the most extreme
/// data points inside [q1 - 1.5 IQR, q3 + 1.5 IQR].
struct FiveNumber {
  double lower_fence = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double upper_fence = 0.0;
};

inline FiveNumber five_number(std::vector<double> values) {
  if (values.empty()) fail(ErrorKind::argument, "summary of an empty set");
  std::sort(values.begin(), values.end());
  FiveNumber s;
  s.q1 = quantile_sorted(values, 0.25);
  s.median = quantile_sorted(values, 0.5);
  s.q3 = quantile_sorted(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo = s.q1 - 1.5 * iqr, hi = s.q3 + 1.5 * iqr;
  s.lower_fence = *std::lower_bound(values.begin(), values.end(), lo);
  s.upper_fence = *(std::upper_bound(values.begin(), values.end(), hi) - 1);
  return s;
}

/// 1-based ranks; ties get the average of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::argument, "pearson needs equal lengths");
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

/// Spearman rank correlation (Pearson on average ranks).
inline double spearman(std::span<const std::pair<double, double>> pairs) {
  if (pairs.size() < 3) fail(ErrorKind::argument, "spearman needs at least 3 pairs, got ", pairs.size());
  std::vector<double> a, b;
  a.reserve(pairs.size());
  b.reserve(pairs.size());
  for (const auto& [x, y] : pairs) {
    a.push_back(x);
    b.push_back(y);
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

}  // namespace mp::stats
