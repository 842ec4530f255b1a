#pragma once

// Fast oracle checks: each compares an implementation against an independent
// brute-force or closed-form reference. Used by `marginpick verify` and the
// acceptance suite.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "marginpick/core/stats.hpp"
#include "marginpick/data/dataset.hpp"
#include "marginpick/gap/gap.hpp"
#include "marginpick/margin/margin.hpp"
#include "marginpick/nn/constrained.hpp"
#include "marginpick/pipeline/pipelines.hpp"
#include "marginpick/train/trainer.hpp"
#include "marginpick/verify/fixtures.hpp"
#include "marginpick/verify/layer_cases.hpp"

namespace mp::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Brute-force references

/// Type-7 quantile from explicit order statistics.
inline double oracle_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(i);
  return (1.0 - frac) * v[i] + frac * v[i + 1];
}

/// Average ranks by counting, then Pearson of the ranks.
inline double oracle_spearman(const std::vector<std::pair<double, double>>& p) {
  const std::size_t n = p.size();
  auto ranks = [&](bool first) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = first ? p[i].first : p[i].second;
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const double vj = first ? p[j].first : p[j].second;
        less += vj < vi;
        equal += vj == vi;
      }
      r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
  };
  const auto ra = ranks(true), rb = ranks(false);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) ma += ra[i], mb += rb[i];
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Checks

inline CheckResult check_layer_gradients(std::size_t probes = 100) {
  CheckResult r{"gradient check, every layer kind (100 probes, 64-bit)"};
  double worst = 0.0;
  std::string worst_kind;
  std::size_t total = 0;
  for (const auto& kind : layer_kinds()) {
    const auto c = check_layer(kind, probes);
    total += c.probes;
    if (c.max_rel_error >= worst) {
      worst = c.max_rel_error;
      worst_kind = kind;
    }
  }
  r.passed = worst < 1e-5;
  r.detail = cat(layer_kinds().size(), " kinds, ", total, " probes, max rel error ", sci(worst), " (", worst_kind,
                 ") < 1e-5");
  return r;
}

inline CheckResult check_constraint_after_sgd() {
  CheckResult r{"constrained kernel residual after 100 SGD steps"};
  const auto d = blob_dataset(64);
  TrainConfig tc;
  tc.max_epochs = 25;  // 4 steps per epoch
  tc.lr = 5e-2;
  tc.early_stop_patience = 1000;
  double worst = 0.0;
  const auto res = train(tiny_model(), tc, d, [&](const Model<float>& m, const EpochRecord&) {
    worst = std::max(worst, constraint_residual(m.constrained_master()).max());
  });
  r.passed = res.record.steps == 100 && worst < 1e-9;
  r.detail = cat(res.record.steps, " steps, max residual ", sci(worst), " < 1e-9");
  return r;
}

inline CheckResult check_linear_margin() {
  CheckResult r{"linear-model latent margin equals boundary distance"};
  Rng rng(4);
  double worst = 0.0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    const std::size_t dim = 1 + rng.index(6);
    Graph<double> g;
    const NodeId x = g.input({1, dim});
    Tensor<double> w({2, dim}), b({2});
    for (auto& v : w.data()) v = rng.normal();
    for (auto& v : b.data()) v = rng.normal();
    const NodeId z = ops::linear(g, x, g.parameter(w, "w"), g.parameter(b, "b"));
    Tensor<double> in({1, dim});
    for (auto& v : in.data()) v = 3.0 * rng.normal();
    g.forward({in});
    const std::size_t c = rng.index(2);
    double num = b[c] - b[1 - c], den = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      num += (w[c * dim + i] - w[(1 - c) * dim + i]) * in[i];
      den += std::pow(w[c * dim + i] - w[(1 - c) * dim + i], 2);
    }
    const double exact = num / std::sqrt(den);
    const NodeId layers[] = {x};
    const std::size_t labels[] = {c};
    const double d = graph_margins(g, z, layers, labels).raw[0][0];
    worst = std::max(worst, std::abs(d - exact) / std::max(1.0, std::abs(exact)));
  }
  r.passed = worst < 1e-10;
  r.detail = cat(trials, " random linear heads, max relative error ", sci(worst), " < 1e-10");
  return r;
}

inline CheckResult check_small_net_bisection() {
  CheckResult r{"2-8-2 network: first-order margin vs bisection oracle"};
  SmallNet net(2, 8, 17);
  auto n = build(net, 1);
  Rng rng(5);
  std::vector<double> deviations;
  std::size_t no_crossing = 0, degenerate = 0;
  double worst_ratio = 0.0;
  const NodeId layers[] = {n.x};
  for (int s = 0; s < 200; ++s) {
    const Tensor<double> in = row({2.0 * rng.normal(), 2.0 * rng.normal()});
    n.g.forward({in});
    const std::size_t label = argmax_row(n.g.value(n.logits), 0);
    Tensor<double> seed({1, 2});
    seed[label] = 1;
    seed[1 - label] = -1;
    const auto grad = n.g.backward(n.logits, seed, layers, false).at(n.x);
    const std::size_t labels[] = {label};
    const double d = graph_margins(n.g, n.logits, layers, labels).raw[0][0];
    if (std::isnan(d)) {
      ++degenerate;
      continue;
    }
    const double norm = std::hypot(grad[0], grad[1]);
    const Tensor<double> u({1, 2}, {-grad[0] / norm, -grad[1] / norm});
    const std::vector<Tensor<double>> inputs = {in};
    try {
      const auto b = margin_oracle_bisect(n.g, std::span<const Tensor<double>>(inputs), n.logits, n.x, label, u);
      if (b.t > 0) deviations.push_back(std::abs(d - b.t) / b.t);
      worst_ratio = std::max(worst_ratio, b.residual / b.scale);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::numeric) throw;
      ++no_crossing;
    }
  }
  const double med = deviations.empty() ? 1.0 : stats::median(deviations);
  r.passed = deviations.size() >= 150 && med < 0.15 && worst_ratio < 1e-8;
  r.detail = cat(deviations.size(), " of 200 samples compared (", no_crossing, " without crossing, ", degenerate,
                 " degenerate), median relative deviation ", sci(med), " < 0.15, max |f1-f2|/scale at t* ",
                 sci(worst_ratio), " < 1e-8");
  return r;
}

inline CheckResult check_statistics_oracles(std::size_t n = 10000) {
  CheckResult r{"margin_summary, spearman, quantile_windows vs brute force (1e4 points)"};
  Rng rng(21);
  // margin_summary: discard non-positive, type-7 quartiles, fences at the nearest retained points.
  std::vector<double> margins(n);
  for (auto& v : margins) v = rng.normal() * 2.0 + 1.0;
  const auto s = margin_summary(margins);
  std::vector<double> pos;
  for (double v : margins)
    if (v > 0) pos.push_back(v);
  const double q1 = oracle_quantile(pos, 0.25), q3 = oracle_quantile(pos, 0.75);
  double lf = std::numeric_limits<double>::infinity(), uf = -lf;
  for (double v : pos) {
    if (v >= q1 - 1.5 * (q3 - q1)) lf = std::min(lf, v);
    if (v <= q3 + 1.5 * (q3 - q1)) uf = std::max(uf, v);
  }
  const double e_summary = std::max({std::abs(s.q1 - q1), std::abs(s.median - oracle_quantile(pos, 0.5)),
                                     std::abs(s.q3 - q3), std::abs(s.lower_fence - lf), std::abs(s.upper_fence - uf)});

  // spearman with ties.
  std::vector<std::pair<double, double>> pairs(n);
  for (auto& p : pairs) p = {std::round(rng.normal() * 30.0), rng.normal() + 0.001 * p.first};
  const double e_spearman = std::abs(stats::spearman(pairs) - oracle_spearman(pairs));

  // quantile_windows: every window recomputed by a full scan.
  std::vector<std::pair<double, double>> pts(n);
  for (auto& p : pts) p = {rng.uniform(), 10.0 * rng.normal()};
  const auto curve = quantile_windows(pts, 0.01, 0.1);
  double e_windows = 0.0;
  bool shape_ok = true;
  for (std::size_t k = 0; k < curve.centers.size(); ++k) {
    const double c = curve.centers[k];
    std::vector<double> g;
    for (const auto& [m, gap] : pts)
      if (m >= c - 0.05 && m <= c + 0.05) g.push_back(gap);
    shape_ok = shape_ok && g.size() == curve.counts[k] && (g.size() >= 10) == curve.q1[k].has_value();
    if (g.size() < 10 || !curve.q1[k]) continue;
    e_windows = std::max({e_windows, std::abs(*curve.q1[k] - oracle_quantile(g, 0.25)),
                          std::abs(*curve.q3[k] - oracle_quantile(g, 0.75)),
                          std::abs(*curve.q90[k] - oracle_quantile(g, 0.9))});
  }
  r.passed = e_summary <= 1e-12 && e_spearman <= 1e-12 && e_windows <= 1e-12 && shape_ok;
  r.detail = cat("max abs error: summary ", sci(e_summary), ", spearman ", sci(e_spearman), ", windows ",
                 sci(e_windows), " (", curve.centers.size(), " windows", shape_ok ? "" : ", COUNT MISMATCH",
                 "); bound 1e-12");
  return r;
}

inline CheckResult check_metric_algebra() {
  CheckResult r{"M_alpha algebra: (1,2,3) values and homogeneity"};
  const std::vector<double> mu = {1, 2, 3};
  const double m1 = margin_metric(mu, 1.0), m2 = margin_metric(mu, 2.0);
  Rng rng(6);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(5 + rng.index(11));
    for (auto& x : v) x = rng.uniform(0.0, 3.0);
    const double c = rng.uniform(0.1, 4.0), alpha = rng.uniform(0.5, 3.0);
    std::vector<double> cv = v;
    for (auto& x : cv) x *= c;
    const double lhs = margin_metric(cv, alpha), rhs = std::pow(c, alpha) * margin_metric(v, alpha);
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
  }
  r.passed = m1 == 6.0 && m2 == 14.0 && worst <= 1e-12;
  r.detail = cat("M1 = ", m1, ", M2 = ", m2, ", homogeneity max relative error ", sci(worst), " <= 1e-12");
  return r;
}

inline CheckResult check_pipeline_sanity() {
  CheckResult r{"pipeline sanity: identities, JPEG-70 PSNR, grid shape"};
  const DataConfig cfg;
  double e_denoise = 0.0, min_psnr = std::numeric_limits<double>::infinity();
  bool sharpen_identity = true, residual_nonzero = true;
  for (std::uint64_t id = 0; id < 5; ++id) {
    const auto scene = render_scene(cfg, plan_scene(cfg, id, Split::test));
    const Image& px = scene.pixels;
    const Image dn = wavelet_denoise(px, 0.0);
    for (std::size_t i = 0; i < px.data.size(); ++i) e_denoise = std::max(e_denoise, std::abs(dn.data[i] - px.data[i]));
    sharpen_identity = sharpen_identity && unsharp_sharpen(px, 0.0) == px;
    const Image j = jpeg_roundtrip(px, 70);
    min_psnr = std::min(min_psnr, psnr(j, px));
    residual_nonzero = residual_nonzero && j != px;
  }
  const auto grid = pipeline_grid();
  bool grid_ok = grid.size() == 20;
  for (const auto& p : grid) grid_ok = grid_ok && p.jpeg_qf == 70;
  r.passed = e_denoise <= 1e-12 && sharpen_identity && min_psnr >= 30.0 && residual_nonzero && grid_ok;
  r.detail = cat("denoise(0) max diff ", sci(e_denoise), ", sharpen(0) identity ", sharpen_identity ? "yes" : "no",
                 ", JPEG-70 min PSNR ", sci(min_psnr), " dB (>= 30), nonzero residual ",
                 residual_nonzero ? "yes" : "no", ", grid ", grid.size(), " pipelines all qf 70 ",
                 grid_ok ? "yes" : "no");
  return r;
}

/// Times and runs a check; exceptions become failures.
inline CheckResult run_check(const std::function<CheckResult()>& fn, const std::string& fallback_name) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  try {
    r = fn();
  } catch (const std::exception& e) {
    r = {fallback_name, false, cat("threw: ", e.what())};
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct NamedCheck {
  std::string name;
  std::function<CheckResult()> fn;
};

inline std::vector<NamedCheck> oracle_suite() {
  return {{"gradients", [] { return check_layer_gradients(); }},
          {"constraint", [] { return check_constraint_after_sgd(); }},
          {"linear-margin", [] { return check_linear_margin(); }},
          {"bisection", [] { return check_small_net_bisection(); }},
          {"statistics", [] { return check_statistics_oracles(); }},
          {"metric-algebra", [] { return check_metric_algebra(); }},
          {"pipelines", [] { return check_pipeline_sanity(); }}};
}

}  // namespace mp::verify
