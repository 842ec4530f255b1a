#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/core/io.hpp"
#include "marginpick/core/log.hpp"
#include "marginpick/core/parallel.hpp"
#include "marginpick/core/stats.hpp"
#include "marginpick/data/dataset.hpp"
#include "marginpick/nn/model.hpp"

namespace mp {

inline constexpr double kMarginEps = 1e-12;
// Latent roster entries used for first/last selection: the constrained conv
// output and the last hidden fully connected output.
inline constexpr std::size_t kFirstMarginLayer = 1;
inline constexpr std::size_t kLastMarginLayer = 7;

inline std::vector<std::size_t> default_margin_layers() {
  std::vector<std::size_t> l(kLogitsLayer);
  std::iota(l.begin(), l.end(), std::size_t{0});
  return l;
}

/// First-order margins of every row of an already forwarded graph, measured in
/// the activation space of each listed node:
///   d = (f_c - f_o) / (||grad(f_c - f_o)|| + eps)
/// with c the row's label and o the other class. A single reverse pass serves
/// the whole batch because rows do not interact in evaluation mode.
/// Degenerate rows (gradient-difference norm below eps) come back as NaN.
struct GraphMargins {
  std::vector<double> logit_diff;        // f_c - f_o per row
  std::vector<std::vector<double>> raw;  // [layer][row]
};

template <typename T>
GraphMargins graph_margins(Graph<T>& g, NodeId logits, std::span<const NodeId> layers,
                           std::span<const std::size_t> labels) {
  const Shape& ls = g.shape(logits);
  if (ls.size() != 2 || ls[1] != kNumClasses) fail(ErrorKind::shape, "logits must be (N,2), got ", to_string(ls));
  const std::size_t n = ls[0];
  if (labels.size() != n) fail(ErrorKind::argument, "got ", labels.size(), " labels for ", n, " rows");
  const Tensor<T>& z = g.value(logits);
  Tensor<T> seed(ls);
  GraphMargins out;
  out.logit_diff.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t c = labels[k];
    if (c >= kNumClasses) fail(ErrorKind::argument, "label ", c, " out of range");
    seed[k * 2 + c] = T{1};
    seed[k * 2 + 1 - c] = T{-1};
    out.logit_diff[k] = static_cast<double>(z[k * 2 + c]) - static_cast<double>(z[k * 2 + 1 - c]);
  }
  const auto grads = g.backward(logits, seed, layers, false);
  for (NodeId id : layers) {
    const Tensor<T>& gr = grads.at(id);
    const std::size_t per = gr.size() / n;
    std::vector<double> d(n);
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < per; ++i) {
        const double v = static_cast<double>(gr[k * per + i]);
        s += v * v;
      }
      const double norm = std::sqrt(s);
      d[k] = norm < kMarginEps ? std::numeric_limits<double>::quiet_NaN()
                               : out.logit_diff[k] / (norm + kMarginEps);
    }
    out.raw.push_back(std::move(d));
  }
  return out;
}

/// Signed first-order margin of one sample (batch of 1) at latent layer l.
template <typename T>
double latent_margin(const Model<T>& model, const Tensor<T>& sample, std::size_t label, std::size_t layer) {
  if (layer >= kLogitsLayer) fail(ErrorKind::argument, "latent layer must be below the logits, got L", layer);
  if (sample.rank() != 4 || sample.dim(0) != 1) fail(ErrorKind::shape, "latent_margin takes a single sample");
  auto d = model.graph(1);
  d.graph.forward({sample});
  const NodeId node = d.latents[layer];
  const std::size_t labels[1] = {label};
  const auto m = graph_margins(d.graph, d.logits, std::span<const NodeId>(&node, 1), labels);
  if (std::isnan(m.raw[0][0])) fail(ErrorKind::numeric, "degenerate margin: gradient difference vanishes at L", layer);
  return m.raw[0][0];
}

/// Per-unit running moments (Chan's pairwise merge of two-pass batch moments).
struct UnitMoments {
  std::size_t count = 0;
  std::vector<double> mean, m2;

  // rows x units, row-major.
  template <typename T>
  void add_rows(std::span<const T> values, std::size_t rows) {
    if (rows == 0) return;
    const std::size_t units = values.size() / rows;
    std::vector<double> bm(units, 0.0), bm2(units, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t u = 0; u < units; ++u) bm[u] += static_cast<double>(values[r * units + u]);
    for (double& v : bm) v /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t u = 0; u < units; ++u) {
        const double dv = static_cast<double>(values[r * units + u]) - bm[u];
        bm2[u] += dv * dv;
      }
    merge(rows, bm, bm2);
  }

  void merge(const UnitMoments& o) { merge(o.count, o.mean, o.m2); }

  // Total variance across units, population convention.
  double total_variance() const {
    if (count < 2) fail(ErrorKind::argument, "layer scale needs at least 2 samples, got ", count);
    double s = 0.0;
    for (double v : m2) s += v;
    return s / static_cast<double>(count);
  }

 private:
  void merge(std::size_t nb, const std::vector<double>& mb, const std::vector<double>& m2b) {
    if (nb == 0) return;
    if (count == 0) {
      count = nb;
      mean = mb;
      m2 = m2b;
      return;
    }
    if (mb.size() != mean.size()) fail(ErrorKind::shape, "moment merge over different unit counts");
    const double na = static_cast<double>(count), nbd = static_cast<double>(nb), n = na + nbd;
    for (std::size_t u = 0; u < mean.size(); ++u) {
      const double delta = mb[u] - mean[u];
      mean[u] += delta * nbd / n;
      m2[u] += m2b[u] + delta * delta * na * nbd / n;
    }
    count += nb;
  }
};

/// sigma_l = sqrt(sum over units of the population variance).
inline double layer_scale(const UnitMoments& m, std::size_t layer = 0) {
  const double s = std::sqrt(m.total_variance());
  if (s == 0.0) log::warn("layer L", layer, " is constant over the sample set; sigma = 0, using eps");
  return s;
}

struct LayerMargins {
  std::size_t layer = 0;
  double sigma = 0.0;
  std::vector<double> raw;         // per sample; NaN = degenerate
  std::vector<double> normalized;  // raw / (sigma + eps)
  std::size_t degenerate = 0;
};

struct MarginReport {
  std::size_t samples = 0;
  std::vector<LayerMargins> layers;

  const LayerMargins& layer(std::size_t l) const {
    for (const auto& m : layers)
      if (m.layer == l) return m;
    fail(ErrorKind::not_found, "no margins for layer L", l);
  }
};

struct MarginOptions {
  std::vector<std::size_t> layers = default_margin_layers();
  std::size_t batch = 128;
  std::size_t jobs = 1;
};

/// Margins of every patch of `set` at the requested latent layers, normalized
/// by the layer scale measured on the same set. Results do not depend on `jobs`.
template <typename T>
MarginReport compute_margins(const Model<T>& model, const PatchSet& set, const MarginOptions& opt = {}) {
  if (set.size() < 2) fail(ErrorKind::argument, "margins need at least 2 samples, got ", set.size());
  if (opt.layers.empty()) fail(ErrorKind::argument, "no layers requested");
  for (std::size_t l : opt.layers)
    if (l >= kLogitsLayer) fail(ErrorKind::argument, "latent layer must be below the logits, got L", l);
  const std::size_t B = std::max<std::size_t>(opt.batch, 1);
  const std::size_t n_batches = (set.size() + B - 1) / B;
  const std::size_t L = opt.layers.size();
  const auto labels = set.labels();

  std::vector<std::vector<UnitMoments>> moments(n_batches, std::vector<UnitMoments>(L));
  std::vector<GraphMargins> parts(n_batches);
  parallel_for(n_batches, opt.jobs, [&](std::size_t b) {
    const std::size_t start = b * B, n = std::min(B, set.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    auto d = model.graph(n);
    d.graph.forward({set.batch<T>(idx)});
    std::vector<NodeId> nodes;
    for (std::size_t l : opt.layers) nodes.push_back(d.latents[l]);
    for (std::size_t k = 0; k < L; ++k) moments[b][k].add_rows(d.graph.value(nodes[k]).data(), n);
    parts[b] = graph_margins(d.graph, d.logits, nodes, std::span<const std::size_t>(labels.data() + start, n));
  });

  MarginReport rep;
  rep.samples = set.size();
  for (std::size_t k = 0; k < L; ++k) {
    UnitMoments total;
    for (std::size_t b = 0; b < n_batches; ++b) total.merge(moments[b][k]);
    LayerMargins lm;
    lm.layer = opt.layers[k];
    lm.sigma = layer_scale(total, lm.layer);
    lm.raw.reserve(set.size());
    for (std::size_t b = 0; b < n_batches; ++b) lm.raw.insert(lm.raw.end(), parts[b].raw[k].begin(), parts[b].raw[k].end());
    lm.normalized.resize(lm.raw.size());
    for (std::size_t i = 0; i < lm.raw.size(); ++i) {
      lm.normalized[i] = lm.raw[i] / (lm.sigma + kMarginEps);
      if (std::isnan(lm.raw[i])) ++lm.degenerate;
    }
    if (lm.degenerate > 0) log::warn("L", lm.layer, ": ", lm.degenerate, " degenerate margins skipped");
    rep.layers.push_back(std::move(lm));
  }
  return rep;
}

/// Box statistics of the positive margins.
struct MarginSummary {
  double lower_fence = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, upper_fence = 0.0;
  std::size_t positive = 0;   // margins kept
  std::size_t discarded = 0;  // non-positive or degenerate

  std::array<double, 5> values() const { return {lower_fence, q1, median, q3, upper_fence}; }
  friend bool operator==(const MarginSummary&, const MarginSummary&) = default;
};

inline MarginSummary margin_summary(std::span<const double> margins) {
  std::vector<double> pos;
  pos.reserve(margins.size());
  for (double d : margins)
    if (d > 0.0) pos.push_back(d);  // NaN compares false
  if (pos.empty()) fail(ErrorKind::numeric, "margin summary unavailable: no positive margins among ", margins.size());
  const auto f = stats::five_number(std::move(pos));
  MarginSummary s{f.lower_fence, f.q1, f.median, f.q3, f.upper_fence, 0, 0};
  for (double d : margins) s.positive += d > 0.0;
  s.discarded = margins.size() - s.positive;
  return s;
}

inline void to_json(nlohmann::json& j, const MarginSummary& s) {
  j = {{"lower_fence", s.lower_fence}, {"q1", s.q1},           {"median", s.median},      {"q3", s.q3},
       {"upper_fence", s.upper_fence}, {"positive", s.positive}, {"discarded", s.discarded}};
}
inline void from_json(const nlohmann::json& j, MarginSummary& s) {
  s.lower_fence = j.at("lower_fence");
  s.q1 = j.at("q1");
  s.median = j.at("median");
  s.q3 = j.at("q3");
  s.upper_fence = j.at("upper_fence");
  s.positive = j.value("positive", std::size_t{0});
  s.discarded = j.value("discarded", std::size_t{0});
}

using LayerSummaries = std::map<std::size_t, MarginSummary>;

// Summaries of the normalized margins of every layer in the report.
inline LayerSummaries summarize(const MarginReport& rep) {
  LayerSummaries out;
  for (const auto& lm : rep.layers) out[lm.layer] = margin_summary(lm.normalized);
  return out;
}

struct MarginSelection {
  enum class Kind { all, first_last, single };
  Kind kind = Kind::first_last;
  std::size_t layer = 0;  // for single

  static MarginSelection all() { return {Kind::all, 0}; }
  static MarginSelection first_last() { return {Kind::first_last, 0}; }
  static MarginSelection single(std::size_t l) { return {Kind::single, l}; }

  std::vector<std::size_t> layers(const LayerSummaries& available) const {
    switch (kind) {
      case Kind::all: {
        std::vector<std::size_t> l;
        for (const auto& [k, v] : available) l.push_back(k);
        return l;
      }
      case Kind::first_last: return {kFirstMarginLayer, kLastMarginLayer};
      case Kind::single: return {layer};
    }
    return {};
  }

  std::string name() const {
    switch (kind) {
      case Kind::all: return "all";
      case Kind::first_last: return "first_last";
      case Kind::single: return cat("L", layer);
    }
    return "?";
  }

  static MarginSelection parse(std::string_view s) {
    if (s == "all") return all();
    if (s == "first_last") return first_last();
    std::string_view rest = s;
    if (rest.starts_with("single:")) rest.remove_prefix(7);
    if (rest.starts_with("L")) rest.remove_prefix(1);
    if (!rest.empty() && rest.find_first_not_of("0123456789") == std::string_view::npos) {
      return single(std::stoul(std::string(rest)));
    }
    fail(ErrorKind::config, "unknown layer selection '", s, "'; use all, first_last or L<k>");
  }
  friend bool operator==(const MarginSelection&, const MarginSelection&) = default;
};

/// M_alpha = sum of mu_i^alpha over the concatenated statistics of the selected layers.
inline double margin_metric(std::span<const double> mu, double alpha) {
  if (!(alpha > 0.0)) fail(ErrorKind::argument, "alpha must be positive, got ", alpha);
  if (mu.empty()) fail(ErrorKind::argument, "empty statistic vector");
  double s = 0.0;
  for (double v : mu) s += std::pow(v, alpha);
  return s;
}

inline double margin_metric(const LayerSummaries& summaries, double alpha, const MarginSelection& sel) {
  const auto layers = sel.layers(summaries);
  if (layers.empty()) fail(ErrorKind::argument, "empty layer selection");
  std::vector<double> mu;
  for (std::size_t l : layers) {
    const auto it = summaries.find(l);
    if (it == summaries.end()) fail(ErrorKind::not_found, "selection ", sel.name(), " needs layer L", l);
    for (double v : it->second.values()) mu.push_back(v);
  }
  return margin_metric(mu, alpha);
}

/// Min-max normalization over a cohort; an all-equal cohort maps to zeros.
inline std::vector<double> normalize_over_cohort(std::span<const double> values) {
  if (values.empty()) fail(ErrorKind::argument, "cannot normalize an empty cohort");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double mn = *lo, mx = *hi;
  std::vector<double> out(values.size(), 0.0);
  if (!(mx > mn)) {
    log::warn("cohort of ", values.size(), " metric values has no spread; all mapped to 0");
    return out;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = values[i] == mx ? 1.0 : (values[i] - mn) / (mx - mn);
  }
  return out;
}

/// Exact crossing of h(t) = f_c - f_o along a direction, by bracketing and bisection.
struct BisectOptions {
  double t_start = 1e-3;
  double growth = 2.0;
  double t_cap = 1e6;
  int iterations = 60;
};

struct BisectResult {
  double t = 0.0;
  double residual = 0.0;  // |h(t)|
  double scale = 0.0;     // |h(0)|
};

inline BisectResult bisect_crossing(const std::function<double(double)>& h, const BisectOptions& opt = {}) {
  const double h0 = h(0.0);
  BisectResult r;
  r.scale = std::abs(h0);
  if (h0 == 0.0) return r;
  double lo = 0.0, hi = opt.t_start, hhi = h(hi);
  while (std::signbit(hhi) == std::signbit(h0) && hhi != 0.0) {
    if (hi >= opt.t_cap) fail(ErrorKind::numeric, "no crossing within t <= ", opt.t_cap);
    lo = hi;
    hi = std::min(hi * opt.growth, opt.t_cap);
    hhi = h(hi);
  }
  double hlo = h(lo);
  for (int it = 0; it < opt.iterations && hhi != 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double hm = h(mid);
    if (hm == 0.0 || std::signbit(hm) != std::signbit(h0)) {
      hi = mid;
      hhi = hm;
    } else {
      lo = mid;
      hlo = hm;
    }
  }
  if (std::abs(hlo) < std::abs(hhi)) {
    r.t = lo;
    r.residual = std::abs(hlo);
  } else {
    r.t = hi;
    r.residual = std::abs(hhi);
  }
  return r;
}

/// Walks the activation of `layer` (batch of 1) along direction u and returns
/// the distance to where the two logits meet.
template <typename T>
BisectResult margin_oracle_bisect(Graph<T>& g, std::span<const Tensor<T>> inputs, NodeId logits, NodeId layer,
                                  std::size_t label, const Tensor<T>& u, const BisectOptions& opt = {}) {
  if (g.shape(logits) != Shape{1, kNumClasses}) fail(ErrorKind::shape, "oracle needs a single-sample graph");
  if (label >= kNumClasses) fail(ErrorKind::argument, "label ", label, " out of range");
  auto h = [&](double t) {
    Tensor<T> off = u;
    for (auto& v : off.data()) v = static_cast<T>(v * t);
    g.set_offset(layer, std::move(off));
    g.forward(inputs);
    const Tensor<T>& z = g.value(logits);
    return static_cast<double>(z[label]) - static_cast<double>(z[1 - label]);
  };
  BisectResult r;
  try {
    r = bisect_crossing(h, opt);
  } catch (...) {
    g.clear_offsets();
    throw;
  }
  g.clear_offsets();
  g.forward(inputs);
  return r;
}

template <typename T>
BisectResult margin_oracle_bisect(const Model<T>& model, const Tensor<T>& sample, std::size_t label,
                                  std::size_t layer, const Tensor<T>& u, const BisectOptions& opt = {}) {
  if (layer >= kLogitsLayer) fail(ErrorKind::argument, "latent layer must be below the logits, got L", layer);
  auto d = model.graph(1);
  const std::vector<Tensor<T>> in = {sample};
  return margin_oracle_bisect(d.graph, std::span<const Tensor<T>>(in), d.logits, d.latents[layer], label, u, opt);
}

/// Columnar dump: sample_id,layer,raw,normalized (degenerate samples omitted).
inline void write_margin_dump(const std::filesystem::path& path, const MarginReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "sample_id,layer,raw,normalized\n";
  for (const auto& lm : rep.layers)
    for (std::size_t i = 0; i < lm.raw.size(); ++i) {
      if (std::isnan(lm.raw[i])) continue;
      os << i << ",L" << lm.layer << ',' << lm.raw[i] << ',' << lm.normalized[i] << '\n';
    }
  io::write_atomic(path, os.str());
}

/// Summary JSON for one run: one entry per layer. Layers without positive
/// margins are recorded with "summary": null.
inline nlohmann::json margin_summary_json(const std::string& run_id, const MarginReport& rep) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& lm : rep.layers) {
    nlohmann::json e = {{"run_id", run_id}, {"layer", cat("L", lm.layer)}, {"sigma", lm.sigma},
                        {"samples", lm.raw.size()}, {"degenerate", lm.degenerate}};
    try {
      e["summary"] = margin_summary(lm.normalized);
    } catch (const Error& err) {
      if (err.kind() != ErrorKind::numeric) throw;
      e["summary"] = nullptr;
    }
    layers.push_back(std::move(e));
  }
  return layers;
}

}  // namespace mp
