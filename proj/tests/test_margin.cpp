#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "marginpick/margin/margin.hpp"
#include "marginpick/train/trainer.hpp"
#include "marginpick/verify/fixtures.hpp"

using namespace mp;
using namespace mp::verify;

namespace {

// Independent quantile: explicit order statistics, written out long-hand.
double oracle_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(i);
  return (1.0 - frac) * v[i] + frac * v[i + 1];
}

ModelConfig tiny_config(Normalization norm = Normalization::batch) {
  ModelConfig c;
  c.normalization = norm;
  c.width_scale = 0.125;
  c.batch_size = 8;
  c.seed = 11;
  return c;
}

PatchSet random_patches(std::size_t n, std::uint64_t seed) {
  PatchSet s;
  s.patch_size = 32;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Image img(32, 32, 3, 0.0);
    for (double& v : img.data) v = rng.uniform();
    s.push(PatchRecord{i, 0, 0, static_cast<Label>(rng.index(2)), 0.0}, img);
  }
  return s;
}

}  // namespace

TEST(LatentMargin, LinearHeadExample) {
  Graph<double> g;
  const NodeId x = g.input({1, 2});
  Tensor<double> w({2, 2}, {1, 0, -1, 0}), b({2});
  const NodeId z = ops::linear(g, x, g.parameter(w, "w"), g.parameter(b, "b"));
  g.forward({row({3, 0})});
  const NodeId layers[] = {x};
  const std::size_t label0[] = {0};
  EXPECT_NEAR(graph_margins(g, z, layers, label0).raw[0][0], 3.0, 1e-10);
  const std::size_t label1[] = {1};
  EXPECT_NEAR(graph_margins(g, z, layers, label1).raw[0][0], -3.0, 1e-10);
  g.forward({row({0, 5})});
  EXPECT_EQ(graph_margins(g, z, layers, label0).raw[0][0], 0.0);
}

TEST(LatentMargin, LinearModelsAreExact) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
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
    EXPECT_NEAR(d, exact, 1e-10 * std::max(1.0, std::abs(exact)));

    // Oracle along the boundary normal: exact crossing to 1e-9.
    Tensor<double> u({1, dim});
    for (std::size_t i = 0; i < dim; ++i)
      u[i] = -(num > 0 ? 1.0 : -1.0) * (w[c * dim + i] - w[(1 - c) * dim + i]) / std::sqrt(den);
    const std::vector<Tensor<double>> inputs = {in};
    const auto r = margin_oracle_bisect(g, std::span<const Tensor<double>>(inputs), z, x, c, u);
    EXPECT_NEAR(r.t, std::abs(exact), 1e-9 * std::max(1.0, std::abs(exact)));
  }
}

TEST(LatentMargin, DegenerateGradientIsNaN) {
  Graph<double> g;
  const NodeId x = g.input({2, 2});
  Tensor<double> w({2, 2}, {1, 1, 1, 1}), b({2}, {0.0, 1.0});
  const NodeId z = ops::linear(g, x, g.parameter(w, "w"), g.parameter(b, "b"));
  g.forward({Tensor<double>({2, 2}, {1, 2, 3, 4})});
  const NodeId layers[] = {x};
  const std::size_t labels[] = {0, 1};
  const auto m = graph_margins(g, z, layers, labels);
  EXPECT_TRUE(std::isnan(m.raw[0][0]));
  EXPECT_TRUE(std::isnan(m.raw[0][1]));
  EXPECT_EQ(m.logit_diff[1], 1.0);
}

TEST(LatentMargin, FirstOrderTracksBisectionOnSmallNet) {
  SmallNet net(2, 8, 17);
  auto n = build(net, 1);
  Rng rng(5);
  std::vector<double> deviations;
  std::size_t no_crossing = 0, degenerate = 0;
  double worst_residual_ratio = 0.0;
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
      const auto r = margin_oracle_bisect(n.g, std::span<const Tensor<double>>(inputs), n.logits, n.x, label, u);
      if (r.t > 0) deviations.push_back(std::abs(d - r.t) / r.t);
      worst_residual_ratio = std::max(worst_residual_ratio, r.residual / r.scale);
    } catch (const Error& e) {
      ASSERT_EQ(e.kind(), ErrorKind::numeric);
      ++no_crossing;
    }
  }
  ASSERT_GE(deviations.size(), 150u) << no_crossing << " without crossing, " << degenerate << " degenerate";
  EXPECT_LT(stats::median(deviations), 0.15);
  EXPECT_LT(worst_residual_ratio, 1e-8);
}

TEST(LatentMargin, BoundarySampleOracleIsZero) {
  Graph<double> g;
  const NodeId x = g.input({1, 2});
  Tensor<double> w({2, 2}, {1, 0, -1, 0}), b({2});
  const NodeId z = ops::linear(g, x, g.parameter(w, "w"), g.parameter(b, "b"));
  const std::vector<Tensor<double>> in = {row({0, 1})};
  g.forward(std::span<const Tensor<double>>(in));
  const auto r = margin_oracle_bisect(g, std::span<const Tensor<double>>(in), z, x, 0, row({-1, 0}));
  EXPECT_EQ(r.t, 0.0);
  // No crossing when walking away from the boundary.
  const std::vector<Tensor<double>> in2 = {row({1, 0})};
  EXPECT_THROW(margin_oracle_bisect(g, std::span<const Tensor<double>>(in2), z, x, 0, row({1, 0})), Error);
}

TEST(LayerScale, VarianceArithmeticAndTwoPassOracle) {
  UnitMoments one;
  const std::vector<double> two = {0.0, 2.0};
  one.add_rows(std::span<const double>(two), 2);
  EXPECT_DOUBLE_EQ(layer_scale(one), 1.0);

  Rng rng(8);
  const std::size_t rows = 301, units = 37;
  std::vector<double> v(rows * units);
  for (auto& x : v) x = 5.0 + 3.0 * rng.normal();
  UnitMoments m;
  for (std::size_t start = 0; start < rows; start += 64) {
    const std::size_t n = std::min<std::size_t>(64, rows - start);
    m.add_rows(std::span<const double>(v.data() + start * units, n * units), n);
  }
  double total = 0.0;
  for (std::size_t u = 0; u < units; ++u) {
    std::vector<double> col;
    for (std::size_t r = 0; r < rows; ++r) col.push_back(v[r * units + u]);
    total += stats::variance(col);
  }
  EXPECT_NEAR(layer_scale(m), std::sqrt(total), 1e-10 * std::sqrt(total));

  UnitMoments single;
  single.add_rows(std::span<const double>(v.data(), units), 1);
  EXPECT_THROW(single.total_variance(), Error);
}

TEST(LayerScale, NormalizedMarginsInvariantToCompensatedRescaling) {
  SmallNet net(3, 6, 21);
  const std::size_t N = 40;
  Tensor<double> xs({N, 3});
  Rng rng(2);
  for (auto& v : xs.data()) v = rng.normal();

  auto measure = [&](SmallNet& m) {
    auto n = build(m, N);
    n.g.forward({xs});
    std::vector<std::size_t> labels(N);
    for (std::size_t k = 0; k < N; ++k) labels[k] = k % 2;
    const NodeId layers[] = {n.hidden};
    const auto gm = graph_margins(n.g, n.logits, layers, labels);
    UnitMoments mom;
    mom.add_rows(n.g.value(n.hidden).data(), N);
    const double sigma = layer_scale(mom);
    std::vector<double> norm;
    for (double d : gm.raw[0]) norm.push_back(d / (sigma + kMarginEps));
    return std::make_pair(sigma, norm);
  };
  const auto [s0, n0] = measure(net);
  const double c = 3.7;
  SmallNet scaled = net;
  for (auto& v : scaled.w1.data()) v *= c;
  for (auto& v : scaled.b1.data()) v *= c;
  for (auto& v : scaled.w2.data()) v /= c;
  const auto [s1, n1] = measure(scaled);
  EXPECT_NEAR(s1, c * s0, 1e-10 * s1);
  for (std::size_t i = 0; i < N; ++i) EXPECT_NEAR(n1[i], n0[i], 1e-9 * std::max(1.0, std::abs(n0[i])));
}

TEST(MarginSummary, Examples) {
  const std::vector<double> a = {-1.0, 2.0};
  const auto s = margin_summary(a);
  for (double v : s.values()) EXPECT_EQ(v, 2.0);
  EXPECT_EQ(s.positive, 1u);
  EXPECT_EQ(s.discarded, 1u);

  const std::vector<double> b = {1, 2, 3, 4, 5};
  const auto t = margin_summary(b);
  EXPECT_EQ(t.q1, 2.0);
  EXPECT_EQ(t.median, 3.0);
  EXPECT_EQ(t.q3, 4.0);
  EXPECT_EQ(t.lower_fence, 1.0);
  EXPECT_EQ(t.upper_fence, 5.0);

  const std::vector<double> outlier = {1, 2, 3, 4, 100, std::nan(""), 0.0};
  const auto o = margin_summary(outlier);
  EXPECT_EQ(o.upper_fence, 4.0);
  EXPECT_EQ(o.discarded, 2u);

  const std::vector<double> none = {-1.0, 0.0};
  try {
    margin_summary(none);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
  }
}

TEST(MarginSummary, MatchesSortOracleOnTenThousandPoints) {
  Rng rng(31);
  std::vector<double> v(10000);
  for (auto& x : v) x = std::exp(rng.normal());
  const auto s = margin_summary(v);
  const double q1 = oracle_quantile(v, 0.25), med = oracle_quantile(v, 0.5), q3 = oracle_quantile(v, 0.75);
  EXPECT_NEAR(s.q1, q1, 1e-12);
  EXPECT_NEAR(s.median, med, 1e-12);
  EXPECT_NEAR(s.q3, q3, 1e-12);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double x : v) {
    if (x >= q1 - 1.5 * (q3 - q1)) lo = std::min(lo, x);
    if (x <= q3 + 1.5 * (q3 - q1)) hi = std::max(hi, x);
  }
  EXPECT_EQ(s.lower_fence, lo);
  EXPECT_EQ(s.upper_fence, hi);
  EXPECT_LE(s.lower_fence, s.q1);
  EXPECT_LE(s.q3, s.upper_fence);

  auto shuffled = v;
  rng.shuffle(shuffled);
  EXPECT_EQ(margin_summary(shuffled), s);
  shuffled.push_back(s.q3 * 2.0);
  EXPECT_GE(margin_summary(shuffled).q3, s.q3);
}

TEST(MarginMetric, ArithmeticAndHomogeneity) {
  const std::vector<double> mu = {1, 2, 3};
  EXPECT_DOUBLE_EQ(margin_metric(mu, 1.0), 6.0);
  EXPECT_DOUBLE_EQ(margin_metric(mu, 2.0), 14.0);
  const std::vector<double> zeros(10, 0.0);
  EXPECT_EQ(margin_metric(zeros, 2.0), 0.0);
  EXPECT_EQ(margin_metric(zeros, 0.5), 0.0);
  Rng rng(3);
  for (double alpha : {0.5, 1.0, 2.0, 3.0}) {
    std::vector<double> m(12), scaled(12);
    const double c = 0.1 + 3.0 * rng.uniform();
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = rng.uniform(0.0, 5.0);
      scaled[i] = c * m[i];
    }
    EXPECT_NEAR(margin_metric(scaled, alpha), std::pow(c, alpha) * margin_metric(m, alpha),
                1e-12 * margin_metric(scaled, alpha));
    auto bigger = m;
    bigger[3] += 1.0;
    EXPECT_GT(margin_metric(bigger, alpha), margin_metric(m, alpha));
  }
  EXPECT_THROW(margin_metric(mu, 0.0), Error);
  EXPECT_THROW(margin_metric(std::vector<double>{}, 1.0), Error);
}

TEST(MarginMetric, LayerSelections) {
  LayerSummaries s;
  for (std::size_t l = 0; l < 8; ++l) s[l] = MarginSummary{1.0 * l, 1.0 * l, 1.0 * l, 1.0 * l, 1.0 * l, 1, 0};
  EXPECT_DOUBLE_EQ(margin_metric(s, 1.0, MarginSelection::single(3)), 15.0);
  EXPECT_DOUBLE_EQ(margin_metric(s, 1.0, MarginSelection::first_last()),
                   5.0 * (kFirstMarginLayer + kLastMarginLayer));
  EXPECT_DOUBLE_EQ(margin_metric(s, 1.0, MarginSelection::all()), 5.0 * 28);
  EXPECT_DOUBLE_EQ(margin_metric(s, 2.0, MarginSelection::single(2)), 20.0);
  EXPECT_THROW(margin_metric(s, 1.0, MarginSelection::single(9)), Error);
  EXPECT_THROW(margin_metric(LayerSummaries{}, 1.0, MarginSelection::all()), Error);
  EXPECT_EQ(MarginSelection::parse("first_last"), MarginSelection::first_last());
  EXPECT_EQ(MarginSelection::parse("L4"), MarginSelection::single(4));
  EXPECT_EQ(MarginSelection::parse("single:2"), MarginSelection::single(2));
  EXPECT_THROW(MarginSelection::parse("middle"), Error);
}

TEST(Cohort, MinMaxNormalization) {
  const std::vector<double> v = {2, 4, 6};
  EXPECT_EQ(normalize_over_cohort(v), (std::vector<double>{0, 0.5, 1}));
  Rng rng(6);
  std::vector<double> r(20), affine(20);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = rng.normal();
    affine[i] = 3.5 * r[i] - 7.0;
  }
  const auto a = normalize_over_cohort(r), b = normalize_over_cohort(affine);
  EXPECT_EQ(*std::min_element(a.begin(), a.end()), 0.0);
  EXPECT_EQ(*std::max_element(a.begin(), a.end()), 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);

  std::vector<std::string> warnings;
  auto previous = log::set_sink([&](log::Level l, const std::string& m) {
    if (l == log::Level::warn) warnings.push_back(m);
  });
  EXPECT_EQ(normalize_over_cohort(std::vector<double>{3, 3, 3}), (std::vector<double>{0, 0, 0}));
  log::set_sink(previous);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_THROW(normalize_over_cohort(std::vector<double>{}), Error);
}

TEST(DetectorMargins, SignConventionAndJobIndependence) {
  for (auto norm : {Normalization::batch, Normalization::group, Normalization::local_response}) {
    Model<float> model(tiny_config(norm));
    const auto set = random_patches(37, 12);
    MarginOptions opt;
    opt.batch = 10;
    const auto a = compute_margins(model, set, opt);
    opt.jobs = 3;
    const auto b = compute_margins(model, set, opt);
    ASSERT_EQ(a.layers.size(), kLogitsLayer);
    const auto preds = predict(model, set);
    const auto labels = set.labels();
    for (std::size_t k = 0; k < a.layers.size(); ++k) {
      EXPECT_EQ(a.layers[k].sigma, b.layers[k].sigma);
      EXPECT_GT(a.layers[k].sigma, 0.0);
      for (std::size_t i = 0; i < set.size(); ++i) {
        const double d = a.layers[k].raw[i];
        if (std::isnan(d)) {
          EXPECT_TRUE(std::isnan(b.layers[k].raw[i]));
          continue;
        }
        EXPECT_EQ(d, b.layers[k].raw[i]);
        if (d == 0.0) continue;
        EXPECT_EQ(d > 0, preds[i] == labels[i]) << "layer " << k << " sample " << i;
      }
    }
  }
}

TEST(DetectorMargins, BatchedMatchesSingleSample) {
  Model<float> model(tiny_config());
  const auto set = random_patches(6, 3);
  MarginOptions opt;
  opt.batch = 4;
  const auto rep = compute_margins(model, set, opt);
  const auto labels = set.labels();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::size_t idx[] = {i};
    const auto x = set.batch<float>(idx);
    for (std::size_t l : {0u, 1u, 4u, 7u}) {
      const double single = latent_margin(model, x, labels[i], l);
      EXPECT_NEAR(rep.layer(l).raw[i], single, 1e-5 * std::max(1.0, std::abs(single)));
    }
  }
  EXPECT_THROW(latent_margin(model, set.batch<float>(std::vector<std::size_t>{0}), 0, kLogitsLayer), Error);
}

TEST(DetectorMargins, OracleCrossesAtLastHiddenLayer) {
  const Model<double> model = Model<float>(tiny_config(Normalization::layer)).cast<double>();
  const auto set = random_patches(4, 9);
  std::size_t checked = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::size_t idx[] = {i};
    const auto x = set.batch<double>(idx);
    auto d = model.graph(1);
    d.graph.forward({x});
    const std::size_t label = predicted_class(d.graph.value(d.logits), 0);
    Tensor<double> seed({1, 2});
    seed[label] = 1;
    seed[1 - label] = -1;
    const NodeId layer = d.latents[kLastMarginLayer];
    const NodeId layers[] = {layer};
    auto g = d.graph.backward(d.logits, seed, layers, false).at(layer);
    double norm = 0;
    for (double v : g.data()) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < kMarginEps) continue;
    for (auto& v : g.data()) v = -v / norm;
    try {
      const auto r = margin_oracle_bisect(model, x, label, kLastMarginLayer, g);
      EXPECT_LT(r.residual, 1e-8 * r.scale);
      ++checked;
    } catch (const Error&) {
    }
  }
  EXPECT_GT(checked, 0u);
}

TEST(DetectorMargins, DumpAndSummaryJson) {
  Model<float> model(tiny_config());
  const auto set = random_patches(12, 5);
  MarginOptions opt;
  opt.layers = {1, 7};
  const auto rep = compute_margins(model, set, opt);
  const auto dir = std::filesystem::temp_directory_path() / "mp_margin_test";
  std::filesystem::create_directories(dir);
  write_margin_dump(dir / "margins.csv", rep);
  const auto text = io::read_file(dir / "margins.csv");
  EXPECT_TRUE(text.starts_with("sample_id,layer,raw,normalized\n"));
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), 1 + 2 * set.size());
  const auto j = margin_summary_json("run_000", rep);
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0]["layer"], "L1");
  EXPECT_EQ(j[1]["run_id"], "run_000");
  std::filesystem::remove_all(dir);
  EXPECT_THROW(compute_margins(model, random_patches(1, 1)), Error);
}

// At patch 32 the fourth block sees a 1x1 extent, where per-(sample, channel)
// standardization is identically zero: the logits ignore the input.
TEST(DetectorMargins, InstanceNormAtUnitExtentIsDegenerate) {
  Model<float> model(tiny_config(Normalization::instance));
  const auto set = random_patches(9, 4);
  std::vector<std::string> warnings;
  auto previous = log::set_sink([&](log::Level, const std::string& m) { warnings.push_back(m); });
  const auto rep = compute_margins(model, set);
  log::set_sink(previous);
  EXPECT_EQ(rep.layer(5).sigma, 0.0);
  // Upstream of the norm nothing reaches the logits; downstream still does.
  for (const auto& lm : rep.layers) EXPECT_EQ(lm.degenerate, lm.layer < 5 ? set.size() : 0u) << "L" << lm.layer;
  EXPECT_FALSE(warnings.empty());
  EXPECT_THROW(summarize(rep), Error);
  const auto j = margin_summary_json("r", rep);
  EXPECT_TRUE(j[0]["summary"].is_null());
}
