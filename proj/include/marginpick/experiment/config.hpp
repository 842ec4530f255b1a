#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "marginpick/core/error.hpp"
#include "marginpick/core/io.hpp"
#include "marginpick/core/rng.hpp"
#include "marginpick/data/dataset.hpp"
#include "marginpick/margin/margin.hpp"
#include "marginpick/nn/config.hpp"
#include "marginpick/pipeline/pipelines.hpp"
#include "marginpick/train/trainer.hpp"

namespace mp {

inline constexpr int kExperimentVersion = 1;

enum class Scale { desk, paper };
enum class GridPreset { paper, desk, smoke, custom };

inline Scale parse_scale(std::string_view s) {
  if (s == "desk") return Scale::desk;
  if (s == "paper") return Scale::paper;
  fail(ErrorKind::config, "unknown scale '", s, "'; use desk or paper");
}

inline GridPreset parse_grid(std::string_view s) {
  if (s == "paper") return GridPreset::paper;
  if (s == "desk") return GridPreset::desk;
  if (s == "smoke") return GridPreset::smoke;
  if (s == "custom") return GridPreset::custom;
  fail(ErrorKind::config, "unknown grid '", s, "'; use paper, desk, smoke or custom");
}

/// Model grid: either the product of the four axes or an explicit list.
/// Width and patch size are shared by every run.
struct ModelGrid {
  std::vector<Normalization> normalizations;
  std::vector<PoolKind> poolings;
  std::vector<double> dropout_rates;
  std::vector<std::size_t> batch_sizes;
  std::vector<ModelConfig> configs;  // explicit list; overrides the axes when non-empty
  double width_scale = 1.0;
  std::uint64_t seed = 22;  // init seed for every run

  /// Resolved run list in grid order (product order: norm, pool, dropout, batch).
  std::vector<ModelConfig> expand(std::size_t patch_size) const {
    std::vector<ModelConfig> out;
    auto finish = [&](ModelConfig c) {
      c.patch_size = patch_size;
      c.width_scale = width_scale;
      c.seed = seed;
      c.validate();
      out.push_back(c);
    };
    if (!configs.empty()) {
      for (const auto& c : configs) finish(c);
      return out;
    }
    for (auto n : normalizations)
      for (auto p : poolings)
        for (double d : dropout_rates)
          for (auto b : batch_sizes) {
            ModelConfig c;
            c.normalization = n;
            c.pooling = p;
            c.dropout_rate = d;
            c.batch_size = b;
            finish(c);
          }
    if (out.empty()) fail(ErrorKind::config, "model grid is empty");
    return out;
  }
};

inline void to_json(nlohmann::json& j, const ModelGrid& g) {
  j = nlohmann::json::object();
  if (!g.configs.empty()) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& c : g.configs)
      list.push_back({{"normalization", std::string(to_string(c.normalization))},
                      {"pooling", std::string(to_string(c.pooling))},
                      {"dropout_rate", c.dropout_rate},
                      {"batch_size", c.batch_size}});
    j["configs"] = list;
  } else {
    std::vector<std::string> n, p;
    for (auto v : g.normalizations) n.emplace_back(to_string(v));
    for (auto v : g.poolings) p.emplace_back(to_string(v));
    j["normalizations"] = n;
    j["poolings"] = p;
    j["dropout_rates"] = g.dropout_rates;
    j["batch_sizes"] = g.batch_sizes;
  }
  j["width_scale"] = g.width_scale;
  j["seed"] = g.seed;
}

inline void from_json(const nlohmann::json& j, ModelGrid& g) {
  g = ModelGrid{};
  if (j.contains("configs")) {
    for (const auto& c : j.at("configs")) {
      ModelConfig m;
      m.normalization = parse_normalization(c.at("normalization").get<std::string>());
      m.pooling = parse_pooling(c.at("pooling").get<std::string>());
      m.dropout_rate = c.at("dropout_rate");
      m.batch_size = c.at("batch_size");
      g.configs.push_back(m);
    }
  } else {
    for (const auto& s : j.at("normalizations")) g.normalizations.push_back(parse_normalization(s.get<std::string>()));
    for (const auto& s : j.at("poolings")) g.poolings.push_back(parse_pooling(s.get<std::string>()));
    g.dropout_rates = j.at("dropout_rates").get<std::vector<double>>();
    g.batch_sizes = j.at("batch_sizes").get<std::vector<std::size_t>>();
  }
  g.width_scale = j.value("width_scale", 1.0);
  g.seed = j.value("seed", std::uint64_t{22});
}

struct AnalysisConfig {
  std::vector<double> alphas = {1.0, 2.0};
  std::vector<std::string> selections = {"all", "first_last"};
  double metric_step = 0.01, metric_window = 0.1;
  double accuracy_step = 1.0, accuracy_window = 10.0;
  std::size_t min_count = 10;
  double convergence_threshold = 0.75;
  std::string margin_split = "train";
  std::size_t margin_batch = 128;
  std::size_t trace_runs = 0;  // evenly spaced runs that also record per-epoch target accuracy
  double pick_alpha = 2.0;
  std::string pick_selection = "first_last";
  bool svg = true;

  void validate() const {
    if (alphas.empty()) fail(ErrorKind::config, "analysis.alphas is empty");
    for (double a : alphas)
      if (!(a > 0.0)) fail(ErrorKind::config, "analysis.alphas must be positive");
    for (const auto& s : selections) MarginSelection::parse(s);
    MarginSelection::parse(pick_selection);
    if (!(pick_alpha > 0.0)) fail(ErrorKind::config, "analysis.pick_alpha must be positive");
    if (!(metric_step > 0 && metric_window > 0 && accuracy_step > 0 && accuracy_window > 0))
      fail(ErrorKind::config, "quantile steps and windows must be positive");
    if (!(convergence_threshold >= 0.0 && convergence_threshold <= 1.0))
      fail(ErrorKind::config, "analysis.convergence_threshold must be in [0,1]");
    parse_split(margin_split);
    if (margin_batch == 0) fail(ErrorKind::config, "analysis.margin_batch must be positive");
  }
};

inline void to_json(nlohmann::json& j, const AnalysisConfig& a) {
  j = {{"alphas", a.alphas},
       {"selections", a.selections},
       {"metric_step", a.metric_step},
       {"metric_window", a.metric_window},
       {"accuracy_step", a.accuracy_step},
       {"accuracy_window", a.accuracy_window},
       {"min_count", a.min_count},
       {"convergence_threshold", a.convergence_threshold},
       {"margin_split", a.margin_split},
       {"margin_batch", a.margin_batch},
       {"trace_runs", a.trace_runs},
       {"pick_alpha", a.pick_alpha},
       {"pick_selection", a.pick_selection},
       {"svg", a.svg}};
}

inline void from_json(const nlohmann::json& j, AnalysisConfig& a) {
  const AnalysisConfig d;
  a.alphas = j.value("alphas", d.alphas);
  a.selections = j.value("selections", d.selections);
  a.metric_step = j.value("metric_step", d.metric_step);
  a.metric_window = j.value("metric_window", d.metric_window);
  a.accuracy_step = j.value("accuracy_step", d.accuracy_step);
  a.accuracy_window = j.value("accuracy_window", d.accuracy_window);
  a.min_count = j.value("min_count", d.min_count);
  a.convergence_threshold = j.value("convergence_threshold", d.convergence_threshold);
  a.margin_split = j.value("margin_split", d.margin_split);
  a.margin_batch = j.value("margin_batch", d.margin_batch);
  a.trace_runs = j.value("trace_runs", d.trace_runs);
  a.pick_alpha = j.value("pick_alpha", d.pick_alpha);
  a.pick_selection = j.value("pick_selection", d.pick_selection);
  a.svg = j.value("svg", d.svg);
}

struct ExperimentConfig {
  int version = kExperimentVersion;
  std::string name = "desk";
  DataConfig data;
  std::vector<PipelineSpec> pipelines = pipeline_grid();
  ModelGrid grid;
  TrainConfig train;
  AnalysisConfig analysis;
  std::string output;  // empty: --out, then $MARGINPICK_OUT, then ./marginpick-out

  void validate() const {
    if (version != kExperimentVersion)
      fail(ErrorKind::config, "unsupported config version ", version, " (expected ", kExperimentVersion, ")");
    data.validate();
    train.validate();
    analysis.validate();
    if (pipelines.empty()) fail(ErrorKind::config, "no target pipelines");
    std::vector<std::uint32_t> ids;
    for (const auto& p : pipelines) {
      p.validate();
      if (std::find(ids.begin(), ids.end(), p.id) != ids.end()) fail(ErrorKind::config, "duplicate pipeline id ", p.id);
      ids.push_back(p.id);
    }
    grid.expand(data.patch_size);
  }

  std::vector<ModelConfig> runs() const { return grid.expand(data.patch_size); }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"version", c.version}, {"name", c.name},   {"data", c.data},         {"grid", c.grid},
       {"train", c.train},     {"analysis", c.analysis}, {"output", c.output}};
  if (c.pipelines == pipeline_grid()) {
    j["pipelines"] = "grid";
  } else {
    j["pipelines"] = c.pipelines;
  }
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (!j.is_object()) fail(ErrorKind::config, "config must be a JSON object");
  static const std::vector<std::string> known = {"version", "name",     "data",     "pipelines",
                                                 "grid",    "train",    "analysis", "output"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) fail(ErrorKind::config, "unknown config key '", k, "'");
  if (!j.contains("version")) fail(ErrorKind::config, "config lacks a version field");
  c.version = j.at("version");
  c.name = j.value("name", c.name);
  if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
  if (j.contains("pipelines")) {
    const auto& p = j.at("pipelines");
    if (p.is_string()) {
      if (p.get<std::string>() != "grid") fail(ErrorKind::config, "pipelines must be \"grid\" or a list");
      c.pipelines = pipeline_grid();
    } else {
      c.pipelines = p.get<std::vector<PipelineSpec>>();
    }
  }
  if (j.contains("grid")) c.grid = j.at("grid").get<ModelGrid>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("analysis")) c.analysis = j.at("analysis").get<AnalysisConfig>();
  c.output = j.value("output", "");
}

/// Parses and validates; JSON and type errors are config errors.
inline ExperimentConfig parse_experiment(const std::string& text, const std::string& what = "config") {
  try {
    ExperimentConfig c = nlohmann::json::parse(text).get<ExperimentConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, what, ": ", e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::config) throw;
    fail(ErrorKind::config, what, ": ", e.what());
  }
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::config, "config file ", path.string(), " not found");
  return parse_experiment(io::read_file(path), path.string());
}

inline std::string dump_experiment(const ExperimentConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Presets

/// Desk grid: batch, layer and group norm x 2 poolings x 4 dropouts; the batch
/// size rotates through 16/32/64 so each size meets every normalization.
/// Instance and local response norm are left out: at patch 32 neither trains
/// past chance within the desk epoch budget.
inline ModelGrid desk_grid() {
  ModelGrid g;
  const Normalization norms[] = {Normalization::batch, Normalization::layer, Normalization::group};
  const double drops[] = {0.2, 0.3, 0.5, 0.6};
  const std::size_t batches[] = {16, 32, 64};
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t d = 0; d < 4; ++d) {
        ModelConfig c;
        c.normalization = norms[n];
        c.pooling = kAllPoolings[p];
        c.dropout_rate = drops[d];
        c.batch_size = batches[(n + p + d) % 3];
        g.configs.push_back(c);
      }
  return g;
}

inline ModelGrid paper_grid() {
  ModelGrid g;
  g.normalizations.assign(kAllNormalizations.begin(), kAllNormalizations.end());
  g.poolings.assign(kAllPoolings.begin(), kAllPoolings.end());
  g.dropout_rates.assign(kGridDropoutRates.begin(), kGridDropoutRates.end());
  g.batch_sizes.assign(kGridBatchSizes.begin(), kGridBatchSizes.end());
  return g;
}

inline ModelGrid smoke_grid() {
  ModelGrid g;
  auto add = [&](Normalization n, PoolKind p, double d, std::size_t b) {
    ModelConfig c;
    c.normalization = n;
    c.pooling = p;
    c.dropout_rate = d;
    c.batch_size = b;
    g.configs.push_back(c);
  };
  add(Normalization::batch, PoolKind::max, 0.5, 64);
  add(Normalization::layer, PoolKind::average, 0.3, 32);
  add(Normalization::group, PoolKind::max, 0.4, 32);
  add(Normalization::local_response, PoolKind::average, 0.6, 64);
  return g;
}

/// Default experiment for a scale. Desk: ~4000 train patches of 32 px, a
/// quarter-width detector and a short momentum schedule; paper: ~20k train
/// patches of 128 px, full width, the full 115-epoch plain-SGD schedule.
inline ExperimentConfig default_experiment(Scale scale, GridPreset grid = GridPreset::paper) {
  ExperimentConfig c;
  if (scale == Scale::desk) {
    c.name = "desk";
    c.data.n_scenes = 1150;
    c.data.patch_size = 32;
    c.train.max_epochs = 10;
    c.train.momentum = 0.9;
    c.analysis.trace_runs = 6;
  } else {
    c.name = "paper";
    c.data.n_scenes = 5650;
    c.data.patch_size = 128;
  }
  switch (grid) {
    case GridPreset::paper: c.grid = paper_grid(); break;
    case GridPreset::desk: c.grid = desk_grid(); break;
    case GridPreset::custom: c.grid = scale == Scale::desk ? desk_grid() : paper_grid(); break;
    case GridPreset::smoke:
      c.grid = smoke_grid();
      c.name += "-smoke";
      if (scale == Scale::desk) {
        c.train.max_epochs = 3;
        c.analysis.trace_runs = 1;
      }
      break;
  }
  c.grid.width_scale = scale == Scale::desk ? 0.25 : 1.0;
  return c;
}

}  // namespace mp
