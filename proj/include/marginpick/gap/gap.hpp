#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/core/io.hpp"
#include "marginpick/core/log.hpp"
#include "marginpick/core/parallel.hpp"
#include "marginpick/core/stats.hpp"
#include "marginpick/nn/config.hpp"
#include "marginpick/train/trainer.hpp"

namespace mp {

/// Generalization gap in percentage points.
inline double generalization_gap(double source_acc, double target_acc) {
  for (double a : {source_acc, target_acc})
    if (!(a >= 0.0 && a <= 1.0)) fail(ErrorKind::argument, "accuracy must be in [0,1], got ", a);
  return 100.0 * (source_acc - target_acc);
}

struct GapRecord {
  std::string run_id;
  ModelConfig config;
  double source_accuracy = 0.0;
  std::vector<std::size_t> pipeline_ids;
  std::vector<double> target_accuracy;
  std::vector<double> gaps;  // pp, per target
  double mean_target_accuracy = 0.0;
  double std_target_accuracy = 0.0;  // sample standard deviation
  double mean_gap = 0.0;             // pp
  std::map<std::string, double> metrics;  // e.g. "M2/first_last", "M1/L3"; absent when unavailable

  // Fills gaps and aggregates from source_accuracy and target_accuracy.
  void finalize() {
    if (target_accuracy.empty()) fail(ErrorKind::argument, "gap record without targets");
    gaps.clear();
    for (double t : target_accuracy) gaps.push_back(generalization_gap(source_accuracy, t));
    mean_target_accuracy = stats::mean(target_accuracy);
    std_target_accuracy = stats::stddev(target_accuracy);
    mean_gap = generalization_gap(source_accuracy, mean_target_accuracy);
  }

  std::optional<double> metric(const std::string& key) const {
    const auto it = metrics.find(key);
    if (it == metrics.end()) return std::nullopt;
    return it->second;
  }
};

inline std::string metric_key(double alpha, const std::string& selection) { return cat("M", alpha, "/", selection); }

inline void to_json(nlohmann::json& j, const GapRecord& r) {
  j = {{"run_id", r.run_id},
       {"config", r.config},
       {"source_accuracy", r.source_accuracy},
       {"pipeline_ids", r.pipeline_ids},
       {"target_accuracy", r.target_accuracy},
       {"gaps", r.gaps},
       {"mean_target_accuracy", r.mean_target_accuracy},
       {"std_target_accuracy", r.std_target_accuracy},
       {"mean_gap", r.mean_gap},
       {"metrics", r.metrics}};
}

inline void from_json(const nlohmann::json& j, GapRecord& r) {
  r.run_id = j.at("run_id");
  r.config = j.at("config").get<ModelConfig>();
  r.source_accuracy = j.at("source_accuracy");
  r.pipeline_ids = j.at("pipeline_ids").get<std::vector<std::size_t>>();
  r.target_accuracy = j.at("target_accuracy").get<std::vector<double>>();
  r.finalize();
  r.metrics = j.value("metrics", std::map<std::string, double>{});
}

/// Accuracy of the model on every target and the resulting gaps.
template <typename T>
GapRecord evaluate_targets(const Model<T>& model, double source_accuracy, std::span<const PatchSet> targets,
                           std::size_t jobs = 1, std::size_t batch = 256) {
  if (targets.empty()) fail(ErrorKind::argument, "no targets to evaluate");
  GapRecord r;
  r.config = model.config();
  r.source_accuracy = source_accuracy;
  r.target_accuracy.resize(targets.size());
  parallel_for(targets.size(), jobs,
               [&](std::size_t i) { r.target_accuracy[i] = evaluate_accuracy(model, targets[i], batch); });
  for (const auto& t : targets) r.pipeline_ids.push_back(t.pipeline_id);
  r.finalize();
  return r;
}

/// Runs with source accuracy at least the threshold (inclusive).
inline std::vector<GapRecord> filter_converged(const std::vector<GapRecord>& records, double threshold = 0.75) {
  std::vector<GapRecord> out;
  for (const auto& r : records)
    if (r.source_accuracy >= threshold) out.push_back(r);
  if (out.empty() && !records.empty())
    log::warn("no run reaches source accuracy ", threshold, " (", records.size(), " runs)");
  return out;
}

struct QuantileCurve {
  double step = 0.0, window = 0.0;
  std::size_t min_count = 10;
  std::vector<double> centers;
  std::vector<std::size_t> counts;
  std::vector<std::optional<double>> q1, q3, q90;  // empty when counts < min_count
};

/// Sliding closed windows [c - w/2, c + w/2] with centers min, min+step, ... <= max.
inline QuantileCurve quantile_windows(std::span<const std::pair<double, double>> pairs, double step, double window,
                                      std::size_t min_count = 10) {
  if (pairs.empty()) fail(ErrorKind::argument, "quantile_windows on no points");
  if (!(step > 0.0) || !(window > 0.0)) fail(ErrorKind::argument, "step and window must be positive");
  std::vector<std::pair<double, double>> sorted(pairs.begin(), pairs.end());
  std::sort(sorted.begin(), sorted.end());
  const double lo = sorted.front().first, hi = sorted.back().first;
  QuantileCurve c;
  c.step = step;
  c.window = window;
  c.min_count = min_count;
  for (std::size_t k = 0;; ++k) {
    const double center = lo + static_cast<double>(k) * step;
    if (center > hi) break;
    const double a = center - window / 2.0, b = center + window / 2.0;
    auto first = std::lower_bound(sorted.begin(), sorted.end(), a,
                                  [](const auto& p, double v) { return p.first < v; });
    std::vector<double> gaps;
    for (auto it = first; it != sorted.end() && it->first <= b; ++it) gaps.push_back(it->second);
    c.centers.push_back(center);
    c.counts.push_back(gaps.size());
    if (gaps.size() >= min_count && !gaps.empty()) {
      std::sort(gaps.begin(), gaps.end());
      c.q1.push_back(stats::quantile_sorted(gaps, 0.25));
      c.q3.push_back(stats::quantile_sorted(gaps, 0.75));
      c.q90.push_back(stats::quantile_sorted(gaps, 0.90));
    } else {
      c.q1.emplace_back();
      c.q3.emplace_back();
      c.q90.emplace_back();
    }
  }
  return c;
}

struct ImpactRow {
  std::string block;  // normalization, pooling, dropout, batch_size
  std::string value;
  std::size_t runs = 0;
  double median_source_accuracy = 0.0;
  double median_metric = 0.0;  // cohort-normalized M2 (first_last)
  double gap_min = 0.0, gap_q1 = 0.0, gap_median = 0.0, gap_q3 = 0.0, gap_max = 0.0;
  bool lowest_median_gap = false;     // within its block
  bool highest_median_metric = false; // within its block
};

struct ImpactTable {
  std::vector<ImpactRow> rows;
  std::vector<std::string> notes;
};

/// Per operator value: median source accuracy, median normalized metric, and
/// the distribution of every (run, target) gap. `normalized_metric[i]` belongs
/// to records[i].
inline ImpactTable operator_impact_table(const std::vector<GapRecord>& records,
                                         std::span<const double> normalized_metric) {
  if (normalized_metric.size() != records.size())
    fail(ErrorKind::argument, "one normalized metric per record required");
  ImpactTable table;
  auto dropout_name = [](double d) { return cat(d); };
  struct Block {
    std::string name;
    std::vector<std::string> values;
    std::function<std::string(const ModelConfig&)> key;
  };
  std::vector<Block> blocks;
  {
    Block b{"normalization", {}, [](const ModelConfig& c) { return std::string(to_string(c.normalization)); }};
    for (auto n : kAllNormalizations) b.values.emplace_back(to_string(n));
    blocks.push_back(b);
  }
  {
    Block b{"pooling", {}, [](const ModelConfig& c) { return std::string(to_string(c.pooling)); }};
    for (auto p : kAllPoolings) b.values.emplace_back(to_string(p));
    blocks.push_back(b);
  }
  {
    Block b{"dropout", {}, [&](const ModelConfig& c) { return dropout_name(c.dropout_rate); }};
    std::vector<double> seen;
    for (double d : kGridDropoutRates) seen.push_back(d);
    for (const auto& r : records)
      if (std::find(seen.begin(), seen.end(), r.config.dropout_rate) == seen.end()) seen.push_back(r.config.dropout_rate);
    std::sort(seen.begin(), seen.end());
    for (double d : seen) b.values.push_back(dropout_name(d));
    blocks.push_back(b);
  }
  {
    Block b{"batch_size", {}, [](const ModelConfig& c) { return cat(c.batch_size); }};
    std::vector<std::size_t> seen(kGridBatchSizes.begin(), kGridBatchSizes.end());
    for (const auto& r : records)
      if (std::find(seen.begin(), seen.end(), r.config.batch_size) == seen.end()) seen.push_back(r.config.batch_size);
    std::sort(seen.begin(), seen.end());
    for (auto v : seen) b.values.push_back(cat(v));
    blocks.push_back(b);
  }

  for (const auto& block : blocks) {
    const std::size_t first_row = table.rows.size();
    for (const auto& value : block.values) {
      std::vector<double> acc, metric, gaps;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (block.key(records[i].config) != value) continue;
        acc.push_back(records[i].source_accuracy);
        metric.push_back(normalized_metric[i]);
        gaps.insert(gaps.end(), records[i].gaps.begin(), records[i].gaps.end());
      }
      if (acc.empty()) {
        table.notes.push_back(cat(block.name, "=", value, ": no runs, row omitted"));
        continue;
      }
      ImpactRow row;
      row.block = block.name;
      row.value = value;
      row.runs = acc.size();
      row.median_source_accuracy = stats::median(acc);
      row.median_metric = stats::median(metric);
      if (gaps.empty()) fail(ErrorKind::argument, "records without gaps in ", block.name, "=", value);
      std::sort(gaps.begin(), gaps.end());
      row.gap_min = gaps.front();
      row.gap_q1 = stats::quantile_sorted(gaps, 0.25);
      row.gap_median = stats::quantile_sorted(gaps, 0.5);
      row.gap_q3 = stats::quantile_sorted(gaps, 0.75);
      row.gap_max = gaps.back();
      table.rows.push_back(row);
    }
    if (table.rows.size() > first_row) {
      auto begin = table.rows.begin() + static_cast<std::ptrdiff_t>(first_row);
      std::min_element(begin, table.rows.end(), [](const auto& a, const auto& b) {
        return a.gap_median < b.gap_median;
      })->lowest_median_gap = true;
      std::max_element(begin, table.rows.end(), [](const auto& a, const auto& b) {
        return a.median_metric < b.median_metric;
      })->highest_median_metric = true;
    }
  }
  return table;
}

/// (source accuracy in %, mean gap) cloud with its windowed quantile curve.
struct OverfitTrend {
  std::vector<std::pair<double, double>> points;
  QuantileCurve curve;
  double spearman = std::numeric_limits<double>::quiet_NaN();  // when >= 3 points
};

inline OverfitTrend overfit_trend(std::span<const std::pair<double, double>> acc_gap, double step = 1.0,
                                  double window = 10.0, std::size_t min_count = 10) {
  OverfitTrend t;
  for (const auto& [acc, gap] : acc_gap) t.points.emplace_back(100.0 * acc, gap);
  t.curve = quantile_windows(t.points, step, window, min_count);
  if (t.points.size() >= 3) t.spearman = stats::spearman(t.points);
  return t;
}

// ---------------------------------------------------------------------------
// Writers

namespace detail {
inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}
inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }
}  // namespace detail

inline std::string gap_records_csv(const std::vector<GapRecord>& records,
                                   const std::vector<std::string>& metric_columns) {
  std::ostringstream os;
  os << "run_id,normalization,pooling,dropout,batch_size,init_seed,source_accuracy,mean_target_accuracy,"
        "std_target_accuracy,mean_gap";
  for (const auto& m : metric_columns) os << ',' << m;
  std::size_t n_targets = 0;
  for (const auto& r : records) n_targets = std::max(n_targets, r.pipeline_ids.size());
  if (!records.empty())
    for (std::size_t id : records.front().pipeline_ids) os << ",gap_p" << id;
  os << '\n';
  for (const auto& r : records) {
    os << r.run_id << ',' << to_string(r.config.normalization) << ',' << to_string(r.config.pooling) << ','
       << r.config.dropout_rate << ',' << r.config.batch_size << ',' << r.config.seed << ','
       << detail::fmt(r.source_accuracy) << ',' << detail::fmt(r.mean_target_accuracy) << ','
       << detail::fmt(r.std_target_accuracy) << ',' << detail::fmt(r.mean_gap);
    for (const auto& m : metric_columns) os << ',' << detail::fmt(r.metric(m));
    for (double g : r.gaps) os << ',' << detail::fmt(g);
    os << '\n';
  }
  return os.str();
}

inline std::string curve_csv(const QuantileCurve& c) {
  std::ostringstream os;
  os << "center,count,q1,q3,q90\n";
  for (std::size_t i = 0; i < c.centers.size(); ++i)
    os << detail::fmt(c.centers[i]) << ',' << c.counts[i] << ',' << detail::fmt(c.q1[i]) << ','
       << detail::fmt(c.q3[i]) << ',' << detail::fmt(c.q90[i]) << '\n';
  return os.str();
}

inline std::string impact_csv(const ImpactTable& t) {
  std::ostringstream os;
  os << "block,value,runs,median_source_accuracy,median_m2_first_last,gap_min,gap_q1,gap_median,gap_q3,gap_max,"
        "lowest_median_gap,highest_median_m2\n";
  for (const auto& r : t.rows)
    os << r.block << ',' << r.value << ',' << r.runs << ',' << detail::fmt(r.median_source_accuracy) << ','
       << detail::fmt(r.median_metric) << ',' << detail::fmt(r.gap_min) << ',' << detail::fmt(r.gap_q1) << ','
       << detail::fmt(r.gap_median) << ',' << detail::fmt(r.gap_q3) << ',' << detail::fmt(r.gap_max) << ','
       << (r.lowest_median_gap ? 1 : 0) << ',' << (r.highest_median_metric ? 1 : 0) << '\n';
  for (const auto& n : t.notes) os << "# " << n << '\n';
  return os.str();
}

/// Three quantile polylines over the metric axis; undefined windows break the lines.
inline std::string curve_svg(const QuantileCurve& c, const std::string& title, const std::string& x_label,
                             const std::string& y_label = "generalization gap (pp)") {
  const double W = 640, H = 400, L = 60, R = 20, T = 40, B = 50;
  double x0 = c.centers.empty() ? 0 : c.centers.front(), x1 = c.centers.empty() ? 1 : c.centers.back();
  if (x1 <= x0) x1 = x0 + 1;
  double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
  for (const auto* q : {&c.q1, &c.q3, &c.q90})
    for (const auto& v : *q)
      if (v) {
        y0 = std::min(y0, *v);
        y1 = std::max(y1, *v);
      }
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (y1 <= y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << x_label << "</text>\n"
     << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
     << (T + H - B) / 2 << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" font-size=\"10\" text-anchor=\"middle\">"
       << detail::fmt(xv) << "</text>\n"
       << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 3 << "\" font-size=\"10\" text-anchor=\"end\">"
       << detail::fmt(yv) << "</text>\n";
  }
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c"};
  const char* names[] = {"Q1", "Q3", "Q(90%)"};
  const std::vector<std::optional<double>>* series[] = {&c.q1, &c.q3, &c.q90};
  for (int s = 0; s < 3; ++s) {
    std::string pts;
    auto flush = [&] {
      if (!pts.empty())
        os << "<polyline fill=\"none\" stroke=\"" << colors[s] << "\" stroke-width=\"1.5\" points=\"" << pts
           << "\"/>\n";
      pts.clear();
    };
    for (std::size_t i = 0; i < c.centers.size(); ++i) {
      const auto& v = (*series[s])[i];
      if (!v) {
        flush();
        continue;
      }
      pts += cat(px(c.centers[i]), ",", py(*v), " ");
    }
    flush();
    os << "<text x=\"" << W - R - 60 << "\" y=\"" << T + 14 * (s + 1) << "\" font-size=\"11\" fill=\"" << colors[s]
       << "\">" << names[s] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace mp
