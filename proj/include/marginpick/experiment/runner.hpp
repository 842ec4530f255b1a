#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/core/io.hpp"
#include "marginpick/core/log.hpp"
#include "marginpick/core/parallel.hpp"
#include "marginpick/core/stats.hpp"
#include "marginpick/experiment/config.hpp"
#include "marginpick/gap/gap.hpp"
#include "marginpick/gap/targets.hpp"
#include "marginpick/margin/margin.hpp"
#include "marginpick/nn/checkpoint.hpp"
#include "marginpick/train/trainer.hpp"

namespace mp {

namespace fs = std::filesystem;

/// On-disk layout under one output root.
struct Layout {
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path data_manifest() const { return data_dir() / "data.json"; }
  fs::path pack(Split s) const { return data_dir() / cat("source_", to_string(s), ".pack"); }
  fs::path targets_dir() const { return data_dir() / "targets"; }
  fs::path runs_dir() const { return root / "runs"; }
  fs::path run_dir(const std::string& id) const { return runs_dir() / id; }
  fs::path run_manifest(const std::string& id) const { return run_dir(id) / "manifest.json"; }
  fs::path report_dir() const { return root / "report"; }
};

inline std::string sweep_run_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run_%03zu", index);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, path.string(), ": ", e.what());
  }
}

// ---------------------------------------------------------------------------
// Data

/// Writes the scene store, the three source packs and every target pack.
/// Returns false when everything was already in place for this data config.
inline bool generate_data(const ExperimentConfig& cfg, const Layout& out, std::size_t jobs = 1) {
  bool generated = false;
  const bool have_source = fs::exists(out.data_manifest());
  if (have_source) {
    const auto j = read_json(out.data_manifest());
    if (j.at("data").get<DataConfig>() != cfg.data)
      fail(ErrorKind::config, out.data_dir().string(), " holds data for a different data config; use another --out");
    for (Split s : kAllSplits)
      if (!fs::exists(out.pack(s))) fail(ErrorKind::data, out.pack(s).string(), " is missing; delete ",
                                          out.data_manifest().string(), " to regenerate");
  } else {
    log::info("generating ", cfg.data.n_scenes, " scenes into ", out.data_dir().string());
    SceneStore store(out.data_dir());
    const auto ds = build_dataset(cfg.data, jobs, [&](const SceneEntry&, const SceneImage& s) { store.put(s); });
    store.write_manifest(cfg.data, ds.scenes);
    nlohmann::json packs = nlohmann::json::object();
    for (Split s : kAllSplits) {
      const std::string bytes = encode_pack(ds.split(s));
      io::write_atomic(out.pack(s), bytes);
      packs[std::string(to_string(s))] = {{"file", out.pack(s).filename().string()},
                                          {"patches", ds.split(s).size()},
                                          {"spliced", ds.split(s).count(Label::spliced)},
                                          {"fnv1a", hex64(fnv1a(bytes))}};
    }
    // The manifest goes last: its presence marks a complete dataset.
    io::write_atomic(out.data_manifest(),
                     nlohmann::json({{"version", 1}, {"data", cfg.data}, {"packs", packs}}).dump(2) + "\n");
    generated = true;
  }
  const SourceDataset ds = [&] {
    SourceDataset d;
    d.config = cfg.data;
    d.scenes = SceneStore(out.data_dir()).read_manifest().second;
    d.test = read_pack(out.pack(Split::test));
    return d;
  }();
  std::size_t missing = 0;
  TargetCache cache(out.targets_dir(), ds, store_provider(SceneStore(out.data_dir())));
  for (const auto& p : cfg.pipelines) missing += !fs::exists(cache.path(p.id));
  if (missing) {
    cache.load(cfg.pipelines, jobs);
    generated = true;
  }
  return generated;
}

inline SourceDataset load_source(const ExperimentConfig& cfg, const Layout& out) {
  if (!fs::exists(out.data_manifest()))
    fail(ErrorKind::data, "no dataset at ", out.data_dir().string(), "; run gen-data first");
  const auto j = read_json(out.data_manifest());
  if (j.at("data").get<DataConfig>() != cfg.data)
    fail(ErrorKind::config, out.data_dir().string(), " holds data for a different data config");
  SourceDataset ds;
  ds.config = cfg.data;
  ds.scenes = SceneStore(out.data_dir()).read_manifest().second;
  for (Split s : kAllSplits) ds.split(s) = read_pack(out.pack(s));
  return ds;
}

inline std::vector<PatchSet> load_targets(const ExperimentConfig& cfg, const Layout& out, const SourceDataset& ds,
                                          std::size_t jobs = 1) {
  return TargetCache(out.targets_dir(), ds, store_provider(SceneStore(out.data_dir()))).load(cfg.pipelines, jobs);
}

// ---------------------------------------------------------------------------
// One run

struct TracePoint {
  std::size_t epoch = 0;
  double source_test_accuracy = 0.0;
  double mean_target_accuracy = 0.0;
  double mean_gap = 0.0;
};

inline void to_json(nlohmann::json& j, const TracePoint& t) {
  j = {{"epoch", t.epoch},
       {"source_test_accuracy", t.source_test_accuracy},
       {"mean_target_accuracy", t.mean_target_accuracy},
       {"mean_gap", t.mean_gap}};
}
inline void from_json(const nlohmann::json& j, TracePoint& t) {
  t.epoch = j.at("epoch");
  t.source_test_accuracy = j.at("source_test_accuracy");
  t.mean_target_accuracy = j.at("mean_target_accuracy");
  t.mean_gap = j.at("mean_gap");
}

/// Everything a run's results depend on; a stored manifest is reused only when
/// its key matches.
inline nlohmann::json run_key(const ExperimentConfig& cfg, const ModelConfig& mc, bool trace) {
  return {{"data", cfg.data},
          {"pipelines", cfg.pipelines},
          {"train", cfg.train},
          {"model", mc},
          {"margins",
           {{"split", cfg.analysis.margin_split},
            {"batch", cfg.analysis.margin_batch},
            {"alphas", cfg.analysis.alphas},
            {"selections", cfg.analysis.selections}}},
          {"trace", trace}};
}

/// Metric keys computed for every run: each alpha with each configured
/// selection, plus every single layer (per-layer curves).
inline std::vector<std::pair<double, MarginSelection>> metric_plan(const AnalysisConfig& a) {
  std::vector<std::pair<double, MarginSelection>> plan;
  std::set<std::string> seen;
  auto add = [&](double alpha, MarginSelection s) {
    if (seen.insert(metric_key(alpha, s.name())).second) plan.emplace_back(alpha, s);
  };
  for (double alpha : a.alphas) {
    for (const auto& s : a.selections) add(alpha, MarginSelection::parse(s));
    for (std::size_t l : default_margin_layers()) add(alpha, MarginSelection::single(l));
  }
  add(a.pick_alpha, MarginSelection::parse(a.pick_selection));
  return plan;
}

/// Trains one configuration and writes runs/<id>/: manifest.json, checkpoint.bin,
/// margins.csv, margin_summary.json and timing.json. Failures are recorded in
/// the manifest (status "failed") and returned, never thrown.
inline nlohmann::json execute_run(const ExperimentConfig& cfg, const ModelConfig& mc, const std::string& id,
                                  std::size_t index, const SourceDataset& ds, std::span<const PatchSet> targets,
                                  const Layout& out, bool trace, std::size_t jobs = 1) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = out.run_dir(id);
  nlohmann::json m = {{"version", 1},        {"run_id", id},          {"index", index},
                      {"key", run_key(cfg, mc, trace)}, {"config", cfg}, {"model_config", mc}};
  try {
    std::vector<TracePoint> points;
    EpochHook hook;
    if (trace) {
      hook = [&](const Model<float>& model, const EpochRecord& e) {
        const double src = evaluate_accuracy(model, ds.test, cfg.train.eval_batch);
        const auto g = evaluate_targets(model, src, targets, jobs, cfg.train.eval_batch);
        points.push_back({e.epoch, src, g.mean_target_accuracy, g.mean_gap});
      };
    }
    auto result = train(mc, cfg.train, ds, hook);
    RunRecord& rec = result.record;
    rec.run_id = id;
    rec.checkpoint = "checkpoint.bin";
    const std::string ckpt = encode_checkpoint(result.model);
    io::write_atomic(dir / rec.checkpoint, ckpt);

    GapRecord gap = evaluate_targets(result.model, rec.source_test_accuracy, targets, jobs, cfg.train.eval_batch);
    gap.run_id = id;

    MarginOptions mo;
    mo.batch = cfg.analysis.margin_batch;
    mo.jobs = jobs;
    const auto rep = compute_margins(result.model, ds.split(parse_split(cfg.analysis.margin_split)), mo);
    write_margin_dump(dir / "margins.csv", rep);
    const auto layers = margin_summary_json(id, rep);
    io::write_atomic(dir / "margin_summary.json", layers.dump(2) + "\n");

    LayerSummaries available;
    bool pathological = false;
    for (const auto& l : layers) {
      if (l.at("summary").is_null()) {
        pathological = true;
        continue;
      }
      available[std::stoul(l.at("layer").get<std::string>().substr(1))] = l.at("summary").get<MarginSummary>();
    }
    for (const auto& [alpha, sel] : metric_plan(cfg.analysis)) {
      if (sel.kind == MarginSelection::Kind::all && pathological) continue;
      bool have = true;
      for (std::size_t l : sel.layers(available)) have = have && available.count(l);
      if (have) gap.metrics[metric_key(alpha, sel.name())] = margin_metric(available, alpha, sel);
    }

    nlohmann::json record = rec;
    record.erase("wall_seconds");
    m["status"] = "ok";
    m["pathological"] = pathological;
    m["record"] = record;
    m["gap"] = gap;
    m["margins"] = {{"split", cfg.analysis.margin_split}, {"samples", rep.samples}, {"layers", layers}};
    m["trace"] = points;
    m["files"] = {{"checkpoint", rec.checkpoint},
                  {"checkpoint_fnv1a", hex64(fnv1a(ckpt))},
                  {"margins", "margins.csv"},
                  {"margin_summary", "margin_summary.json"}};
  } catch (const Error& e) {
    log::warn(id, " failed (", to_string(e.kind()), "): ", e.what());
    m["status"] = "failed";
    m["error"] = {{"kind", to_string(e.kind())}, {"message", e.what()}};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_atomic(dir / "timing.json", nlohmann::json({{"wall_seconds", secs}}).dump() + "\n");
  io::write_atomic(out.run_manifest(id), m.dump(2) + "\n");
  return m;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepSummary {
  std::size_t runs = 0, executed = 0, resumed = 0, failed = 0;
};

/// Whether grid run i of n records a per-epoch trace: `count` evenly spaced runs.
inline bool traced(std::size_t i, std::size_t n, std::size_t count) {
  return count > 0 && (count >= n || (i * count) % n < count);
}

/// Runs every grid configuration not already present, `jobs` runs at a time
/// (each run single-threaded, so results do not depend on `jobs`).
inline SweepSummary run_sweep(const ExperimentConfig& cfg, const Layout& out, std::size_t jobs = 1) {
  generate_data(cfg, out, jobs);
  const SourceDataset ds = load_source(cfg, out);
  const auto targets = load_targets(cfg, out, ds, jobs);
  const auto configs = cfg.runs();
  SweepSummary s;
  s.runs = configs.size();
  std::vector<int> state(configs.size(), 0);  // 1 executed, 2 resumed; +10 failed
  log::info("sweep: ", configs.size(), " runs, ", jobs, " worker(s), output ", out.root.string());
  parallel_for(configs.size(), jobs, [&](std::size_t i) {
    const std::string id = sweep_run_id(i);
    const bool trace = traced(i, configs.size(), cfg.analysis.trace_runs);
    if (fs::exists(out.run_manifest(id))) {
      const auto m = read_json(out.run_manifest(id));
      if (m.value("key", nlohmann::json()) != run_key(cfg, configs[i], trace))
        fail(ErrorKind::config, out.run_dir(id).string(), " was produced by a different config; use another --out");
      state[i] = 2 + (m.at("status") != "ok") * 10;
      return;
    }
    const auto m = execute_run(cfg, configs[i], id, i, ds, targets, out, trace);
    state[i] = 1 + (m.at("status") != "ok") * 10;
    log::info(id, " ", m.at("status").get<std::string>(),
              m.contains("record") ? cat(" source acc ", m["record"]["source_test_accuracy"].get<double>(),
                                         " mean gap ", m["gap"]["mean_gap"].get<double>())
                                   : std::string());
  });
  for (int v : state) {
    s.executed += v % 10 == 1;
    s.resumed += v % 10 == 2;
    s.failed += v >= 10;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Collected results

struct RunResult {
  std::string run_id;
  bool ok = false;
  bool pathological = false;
  GapRecord gap;
  std::vector<TracePoint> trace;
  std::string error;
};

/// Every run manifest under runs/, in run id order.
inline std::vector<RunResult> collect_runs(const Layout& out) {
  if (!fs::is_directory(out.runs_dir())) fail(ErrorKind::data, "no runs under ", out.root.string());
  std::vector<fs::path> manifests;
  for (const auto& e : fs::directory_iterator(out.runs_dir()))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) manifests.push_back(e.path() / "manifest.json");
  if (manifests.empty()) fail(ErrorKind::data, "no run manifests under ", out.runs_dir().string());
  std::sort(manifests.begin(), manifests.end());
  std::vector<RunResult> runs;
  for (const auto& p : manifests) {
    const auto m = read_json(p);
    RunResult r;
    r.run_id = m.at("run_id");
    r.ok = m.at("status") == "ok";
    if (r.ok) {
      r.gap = m.at("gap").get<GapRecord>();
      r.pathological = m.value("pathological", false);
      r.trace = m.value("trace", std::vector<TracePoint>{});
    } else {
      r.error = m.at("error").at("message");
    }
    runs.push_back(std::move(r));
  }
  return runs;
}

struct PickResult {
  std::string run_id;
  std::string metric;
  double value = 0.0;
  double source_accuracy = 0.0;
  double mean_gap = 0.0;
  std::size_t candidates = 0;
};

inline void to_json(nlohmann::json& j, const PickResult& p) {
  j = {{"run_id", p.run_id},         {"metric", p.metric},     {"value", p.value},
       {"source_accuracy", p.source_accuracy}, {"mean_gap", p.mean_gap}, {"candidates", p.candidates}};
}

/// The converged run with the largest metric; ties go to the higher source
/// accuracy, then the lower run id.
inline PickResult pick_run(const std::vector<GapRecord>& records, double threshold, double alpha,
                           const MarginSelection& sel) {
  const auto converged = filter_converged(records, threshold);
  const std::string key = metric_key(alpha, sel.name());
  const GapRecord* best = nullptr;
  std::size_t candidates = 0;
  for (const auto& r : converged) {
    const auto v = r.metric(key);
    if (!v) continue;
    ++candidates;
    if (!best) {
      best = &r;
      continue;
    }
    const double b = *best->metric(key);
    if (*v > b || (*v == b && (r.source_accuracy > best->source_accuracy ||
                               (r.source_accuracy == best->source_accuracy && r.run_id < best->run_id))))
      best = &r;
  }
  if (!best)
    fail(ErrorKind::data, "no converged run (source accuracy >= ", threshold, ") with metric ", key, " among ",
         records.size(), " runs");
  return {best->run_id, key, *best->metric(key), best->source_accuracy, best->mean_gap, candidates};
}

// ---------------------------------------------------------------------------
// Report

/// Builds every report file in memory; nothing is written when inputs are missing.
inline std::map<std::string, std::string> build_report(const std::vector<RunResult>& runs, const AnalysisConfig& a) {
  std::vector<GapRecord> records;
  std::size_t failed = 0, pathological = 0;
  for (const auto& r : runs) {
    if (!r.ok) {
      ++failed;
      continue;
    }
    pathological += r.pathological;
    records.push_back(r.gap);
  }
  if (records.empty()) fail(ErrorKind::data, "no successful runs to report on (", runs.size(), " manifests)");

  std::map<std::string, std::string> files;
  std::set<std::string> keys;
  for (const auto& r : records)
    for (const auto& [k, v] : r.metrics) keys.insert(k);
  const std::vector<std::string> key_list(keys.begin(), keys.end());
  files["gap_records.csv"] = gap_records_csv(records, key_list);
  const auto converged = filter_converged(records, a.convergence_threshold);
  files["converged_records.csv"] = gap_records_csv(converged, key_list);

  nlohmann::json summary = {{"runs", runs.size()},
                            {"succeeded", records.size()},
                            {"failed", failed},
                            {"pathological", pathological},
                            {"converged", converged.size()},
                            {"convergence_threshold", a.convergence_threshold}};

  auto emit_curve = [&](const std::string& name, const QuantileCurve& c, const std::string& title,
                        const std::string& x_label) {
    files[cat("curves/", name, ".csv")] = curve_csv(c);
    if (a.svg) files[cat("curves/", name, ".svg")] = curve_svg(c, title, x_label);
  };

  // Metric curves and rank correlations over the converged cohort.
  nlohmann::json corr = nlohmann::json::object();
  std::map<std::string, std::vector<double>> normalized;  // key -> per converged record (NaN when absent)
  for (const auto& key : key_list) {
    std::vector<double> raw;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < converged.size(); ++i)
      if (auto v = converged[i].metric(key)) {
        raw.push_back(*v);
        idx.push_back(i);
      }
    auto& col = normalized[key];
    col.assign(converged.size(), std::numeric_limits<double>::quiet_NaN());
    if (raw.empty()) continue;
    const auto norm = normalize_over_cohort(raw);
    for (std::size_t k = 0; k < idx.size(); ++k) col[idx[k]] = norm[k];
    std::vector<std::pair<double, double>> per_run, per_target;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& r = converged[idx[k]];
      per_run.emplace_back(norm[k], r.mean_gap);
      for (double g : r.gaps) per_target.emplace_back(norm[k], g);
    }
    nlohmann::json c = {{"runs", per_run.size()}};
    c["spearman_mean_gap"] = per_run.size() >= 3 ? nlohmann::json(stats::spearman(per_run)) : nlohmann::json();
    corr[key] = c;
    const bool wanted = std::find(a.selections.begin(), a.selections.end(), key.substr(key.find('/') + 1)) !=
                            a.selections.end() ||
                        (key.rfind("M1/L", 0) == 0);
    if (wanted) {
      std::string file = key;
      std::replace(file.begin(), file.end(), '/', '_');
      emit_curve(cat("metric_", file), quantile_windows(per_target, a.metric_step, a.metric_window, a.min_count),
                 cat("gap quantiles vs normalized ", key), cat("normalized ", key));
    }
  }
  summary["correlation"] = corr;

  // Accuracy curve over final runs and the per-epoch overfit curve.
  std::vector<std::pair<double, double>> acc_gap, epoch_points;
  for (const auto& r : records) acc_gap.emplace_back(r.source_accuracy, r.mean_gap);
  for (const auto& r : runs)
    for (const auto& t : r.trace) epoch_points.emplace_back(t.source_test_accuracy, t.mean_gap);
  const auto acc = overfit_trend(acc_gap, a.accuracy_step, a.accuracy_window, a.min_count);
  emit_curve("accuracy", acc.curve, "gap quantiles vs source accuracy (runs)", "source test accuracy (%)");
  summary["accuracy_gap_spearman"] = std::isnan(acc.spearman) ? nlohmann::json() : nlohmann::json(acc.spearman);
  if (!epoch_points.empty()) {
    const auto ov = overfit_trend(epoch_points, a.accuracy_step, a.accuracy_window, a.min_count);
    emit_curve("overfit", ov.curve, "gap quantiles vs source accuracy (per-epoch checkpoints)",
               "source test accuracy (%)");
    summary["overfit"] = {{"points", ov.points.size()},
                          {"spearman", std::isnan(ov.spearman) ? nlohmann::json() : nlohmann::json(ov.spearman)}};
  }

  // Operator impact table on the pick metric.
  const std::string pick_key = metric_key(a.pick_alpha, MarginSelection::parse(a.pick_selection).name());
  if (!converged.empty()) {
    std::vector<GapRecord> with;
    std::vector<double> m;
    for (std::size_t i = 0; i < converged.size(); ++i)
      if (!std::isnan(normalized[pick_key].empty() ? NAN : normalized[pick_key][i])) {
        with.push_back(converged[i]);
        m.push_back(normalized[pick_key][i]);
      }
    if (!with.empty()) files["impact.csv"] = impact_csv(operator_impact_table(with, m));
  }
  summary["pick"] = nullptr;
  if (!converged.empty()) {
    try {
      summary["pick"] = pick_run(converged, a.convergence_threshold, a.pick_alpha,
                                 MarginSelection::parse(a.pick_selection));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::data) throw;
    }
  }
  files["summary.json"] = summary.dump(2) + "\n";
  return files;
}

inline void write_report(const fs::path& dir, const std::map<std::string, std::string>& files) {
  for (const auto& [name, bytes] : files) io::write_atomic(dir / name, bytes);
}

}  // namespace mp
