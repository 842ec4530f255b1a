#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "marginpick/core/io.hpp"
#include "marginpick/core/log.hpp"
#include "marginpick/experiment/config.hpp"
#include "marginpick/experiment/runner.hpp"

namespace mp {

/// Flags shared by the subcommands; unset optionals fall back to the config.
struct CommandOptions {
  std::string config;  // path; empty = preset for --scale/--grid
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::optional<GridPreset> grid;
  Scale scale = Scale::desk;
  std::string out;
};

/// Experiment config from --config or the scale/grid presets, with --grid applied.
inline ExperimentConfig resolve_config(const CommandOptions& o) {
  ExperimentConfig cfg;
  if (!o.config.empty()) {
    cfg = load_experiment(o.config);
    if (o.grid && *o.grid != GridPreset::custom) {
      const auto preset = default_experiment(o.scale, *o.grid);
      cfg.grid.normalizations = preset.grid.normalizations;
      cfg.grid.poolings = preset.grid.poolings;
      cfg.grid.dropout_rates = preset.grid.dropout_rates;
      cfg.grid.batch_sizes = preset.grid.batch_sizes;
      cfg.grid.configs = preset.grid.configs;
    }
  } else {
    if (o.grid == GridPreset::custom) fail(ErrorKind::config, "--grid custom takes its grid from --config");
    cfg = default_experiment(o.scale, o.grid.value_or(o.scale == Scale::desk ? GridPreset::desk : GridPreset::paper));
  }
  cfg.validate();
  return cfg;
}

inline Layout resolve_layout(const CommandOptions& o, const ExperimentConfig& cfg) {
  return Layout{io::output_root(!o.out.empty() ? o.out : cfg.output)};
}

// ---------------------------------------------------------------------------

/// Scene store, source packs and target packs. Idempotent for a data config;
/// --seed sets the data seed.
inline nlohmann::json cmd_gen_data(ExperimentConfig cfg, const CommandOptions& o) {
  if (o.seed) cfg.data.seed = *o.seed;
  const Layout out = resolve_layout(o, cfg);
  const bool generated = generate_data(cfg, out, o.jobs);
  const auto m = read_json(out.data_manifest());
  log::info(generated ? "data written to " : "data already up to date in ", out.data_dir().string());
  return m;
}

struct TrainSelector {
  std::optional<std::size_t> grid_index;
  std::optional<std::string> normalization, pooling;
  std::optional<double> dropout_rate;
  std::optional<std::size_t> batch_size;
  std::string run_id;  // empty = derived from the configuration
};

inline ModelConfig select_model(const ExperimentConfig& cfg, const TrainSelector& s) {
  ModelConfig mc;
  if (s.grid_index) {
    const auto runs = cfg.runs();
    if (*s.grid_index >= runs.size())
      fail(ErrorKind::config, "--run ", *s.grid_index, " outside the grid of ", runs.size(), " runs");
    mc = runs[*s.grid_index];
  }
  if (s.normalization) mc.normalization = parse_normalization(*s.normalization);
  if (s.pooling) mc.pooling = parse_pooling(*s.pooling);
  if (s.dropout_rate) mc.dropout_rate = *s.dropout_rate;
  if (s.batch_size) mc.batch_size = *s.batch_size;
  mc.patch_size = cfg.data.patch_size;
  mc.width_scale = cfg.grid.width_scale;
  mc.seed = cfg.grid.seed;
  mc.validate();
  return mc;
}

inline std::string train_run_id(const ModelConfig& mc) {
  return cat("train_", to_string(mc.normalization), "_", to_string(mc.pooling), "_d", mc.dropout_rate, "_b",
             mc.batch_size, "_s", mc.seed);
}

/// One training on the generated dataset; --seed sets the init seed only, so
/// runs differing in --seed share data order and dropout masks.
inline nlohmann::json cmd_train(ExperimentConfig cfg, const CommandOptions& o, const TrainSelector& sel) {
  if (o.seed) cfg.grid.seed = *o.seed;
  const Layout out = resolve_layout(o, cfg);
  const ModelConfig mc = select_model(cfg, sel);
  const SourceDataset ds = load_source(cfg, out);
  const auto targets = load_targets(cfg, out, ds, o.jobs);
  const std::string id = sel.run_id.empty() ? train_run_id(mc) : sel.run_id;
  log::info("training ", id);
  auto m = execute_run(cfg, mc, id, 0, ds, targets, out, cfg.analysis.trace_runs > 0, o.jobs);
  if (m.at("status") != "ok") {
    const auto& e = m.at("error");
    const std::string kind = e.at("kind");
    ErrorKind k = ErrorKind::numeric;
    for (auto candidate : {ErrorKind::config, ErrorKind::data, ErrorKind::numeric, ErrorKind::io})
      if (kind == to_string(candidate)) k = candidate;
    fail(k, id, ": ", e.at("message").get<std::string>());
  }
  return m;
}

/// Report files from every run manifest under the output root.
inline std::map<std::string, std::string> cmd_report(const Layout& out, const AnalysisConfig& a) {
  const auto runs = collect_runs(out);
  auto files = build_report(runs, a);
  write_report(out.report_dir(), files);
  return files;
}

/// Analysis settings for report/pick: --config, else the sweep's stored config.
inline AnalysisConfig stored_analysis(const CommandOptions& o, const Layout& out) {
  if (!o.config.empty()) return load_experiment(o.config).analysis;
  const fs::path stored = out.root / "experiment.json";
  if (fs::exists(stored)) return parse_experiment(io::read_file(stored), stored.string()).analysis;
  return AnalysisConfig{};
}

/// Whole grid: data, runs (resumed from manifests), report. --seed sets the
/// init and training seeds of every run.
inline SweepSummary cmd_sweep(ExperimentConfig cfg, const CommandOptions& o) {
  if (o.seed) cfg.grid.seed = cfg.train.seed = *o.seed;
  const Layout out = resolve_layout(o, cfg);
  const fs::path stored = out.root / "experiment.json";
  if (fs::exists(stored)) {
    const auto prev = parse_experiment(io::read_file(stored), stored.string());
    if (nlohmann::json(prev.data) != nlohmann::json(cfg.data) || nlohmann::json(prev.train) != nlohmann::json(cfg.train))
      fail(ErrorKind::config, out.root.string(), " holds a sweep with a different data or train config");
  }
  io::write_atomic(stored, dump_experiment(cfg));
  const auto s = run_sweep(cfg, out, o.jobs);
  log::info("sweep done: ", s.runs, " runs (", s.executed, " executed, ", s.resumed, " resumed, ", s.failed,
            " failed)");
  cmd_report(out, cfg.analysis);
  return s;
}

inline PickResult cmd_pick(const Layout& out, const AnalysisConfig& a) {
  std::vector<GapRecord> records;
  for (const auto& r : collect_runs(out))
    if (r.ok) records.push_back(r.gap);
  return pick_run(records, a.convergence_threshold, a.pick_alpha, MarginSelection::parse(a.pick_selection));
}

}  // namespace mp
