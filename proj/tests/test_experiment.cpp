#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>

#include "marginpick/experiment/commands.hpp"

using namespace mp;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.name = "tiny";
  c.data.n_scenes = 40;
  c.data.seed = 5;
  c.pipelines = {PipelineSpec{1, 1.0, 0.5, 1.0, 70}, PipelineSpec{2, 0.0, 1.5, 1.0, 70}};
  auto add = [&](Normalization n, PoolKind p, double d, std::size_t b) {
    ModelConfig m;
    m.normalization = n;
    m.pooling = p;
    m.dropout_rate = d;
    m.batch_size = b;
    c.grid.configs.push_back(m);
  };
  add(Normalization::batch, PoolKind::max, 0.2, 16);
  add(Normalization::group, PoolKind::average, 0.4, 32);
  add(Normalization::layer, PoolKind::max, 0.3, 16);
  c.grid.width_scale = 0.125;
  c.train.max_epochs = 2;
  c.train.momentum = 0.9;
  c.analysis.trace_runs = 1;
  c.analysis.min_count = 2;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / cat("mp_exp_", name);
  fs::remove_all(d);
  return d;
}

CommandOptions opts(const fs::path& out, std::size_t jobs = 1) {
  CommandOptions o;
  o.out = out.string();
  o.jobs = jobs;
  return o;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root, const std::set<std::string>& skip_names = {}) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && !skip_names.count(e.path().filename().string()))
      out[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  return out;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::state;  // "did not throw"
}

GapRecord record(const std::string& id, double src, double metric) {
  GapRecord r;
  r.run_id = id;
  r.source_accuracy = src;
  r.target_accuracy = {src - 0.01};
  r.pipeline_ids = {1};
  r.finalize();
  r.metrics["M2/first_last"] = metric;
  return r;
}

}  // namespace

TEST(ExperimentConfig, PresetsAndRoundTrip) {
  for (auto scale : {Scale::desk, Scale::paper})
    for (auto grid : {GridPreset::paper, GridPreset::desk, GridPreset::smoke}) {
      const auto c = default_experiment(scale, grid);
      c.validate();
      const std::string text = dump_experiment(c);
      const auto back = parse_experiment(text);
      EXPECT_EQ(dump_experiment(back), text);
      EXPECT_EQ(nlohmann::json(back.runs()), nlohmann::json(c.runs()));
    }
  EXPECT_EQ(default_experiment(Scale::desk, GridPreset::paper).runs().size(), 200u);
  EXPECT_EQ(default_experiment(Scale::desk, GridPreset::smoke).runs().size(), 4u);
  const auto desk = default_experiment(Scale::desk, GridPreset::desk);
  const auto runs = desk.runs();
  ASSERT_EQ(runs.size(), 24u);
  std::set<std::string> distinct;
  std::set<std::pair<int, std::size_t>> norm_batch;
  for (const auto& r : runs) {
    distinct.insert(nlohmann::json(r).dump());
    norm_batch.insert({static_cast<int>(r.normalization), r.batch_size});
    EXPECT_TRUE(r.on_paper_grid());
    EXPECT_EQ(r.width_scale, 0.25);
    EXPECT_EQ(r.seed, 22u);
  }
  EXPECT_EQ(distinct.size(), 24u);
  EXPECT_EQ(norm_batch.size(), 9u);
  EXPECT_EQ(desk.pipelines.size(), 20u);
  EXPECT_EQ(desk.train.seed, 22u);
  const auto paper = default_experiment(Scale::paper);
  EXPECT_EQ(paper.train.max_epochs, 115u);
  EXPECT_EQ(paper.train.momentum, 0.0);
  EXPECT_EQ(paper.data.patch_size, 128u);
}

TEST(ExperimentConfig, ExplicitListsRoundTrip) {
  const auto c = tiny_experiment();
  const auto back = parse_experiment(dump_experiment(c));
  EXPECT_EQ(dump_experiment(back), dump_experiment(c));
  EXPECT_EQ(back.pipelines, c.pipelines);
  EXPECT_EQ(back.runs().size(), 3u);
}

TEST(ExperimentConfig, ValidationErrorsAreConfigErrors) {
  auto text = [](const std::string& patch) {
    auto j = nlohmann::json(tiny_experiment());
    j.merge_patch(nlohmann::json::parse(patch));
    return j.dump();
  };
  for (const std::string bad : {R"({"version": 2})", R"({"extra": 1})", R"({"train": {"lr": -1}})",
                                R"({"analysis": {"selections": ["middle"]}})",
                                R"({"pipelines": [{"id": 1, "jpeg_qf": 0}]})", R"({"data": {"n_scenes": "many"}})"}) {
    EXPECT_EQ(kind_of([&] { parse_experiment(text(bad)); }), ErrorKind::config) << bad;
  }
  auto j = nlohmann::json(tiny_experiment());
  j["grid"]["configs"][0]["normalization"] = "weight";
  try {
    parse_experiment(j.dump());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("instance, batch, layer, local_response, group"), std::string::npos);
  }
  j = nlohmann::json(tiny_experiment());
  j.erase("version");
  EXPECT_EQ(kind_of([&] { parse_experiment(j.dump()); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { parse_experiment("{ not json"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { load_experiment("/nonexistent/config.json"); }), ErrorKind::config);
}

TEST(ExperimentConfig, TracedRunsAreEvenlySpaced) {
  std::vector<std::size_t> t;
  for (std::size_t i = 0; i < 24; ++i)
    if (traced(i, 24, 6)) t.push_back(i);
  EXPECT_EQ(t, (std::vector<std::size_t>{0, 4, 8, 12, 16, 20}));
  std::size_t n = 0;
  for (std::size_t i = 0; i < 4; ++i) n += traced(i, 4, 1);
  EXPECT_EQ(n, 1u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(traced(i, 3, 5));
  EXPECT_FALSE(traced(0, 3, 0));
}

TEST(Commands, GenDataIsIdempotent) {
  const auto dir = fresh_dir("gen");
  auto cfg = tiny_experiment();
  const Layout out{dir};
  EXPECT_TRUE(generate_data(cfg, out));
  const auto before = tree_bytes(dir);
  EXPECT_FALSE(generate_data(cfg, out));
  EXPECT_EQ(tree_bytes(dir), before);
  // Regenerating from scratch reproduces every byte.
  const auto dir2 = fresh_dir("gen2");
  generate_data(cfg, Layout{dir2});
  EXPECT_EQ(tree_bytes(dir2), before);
  // Same output root, different data config.
  cfg.data.seed = 6;
  EXPECT_EQ(kind_of([&] { generate_data(cfg, out); }), ErrorKind::config);
  // A new pipeline only adds its target pack.
  cfg = tiny_experiment();
  cfg.pipelines.push_back(PipelineSpec{3, 2.0, 0.0, 1.0, 70});
  EXPECT_TRUE(generate_data(cfg, out));
  EXPECT_TRUE(fs::exists(out.targets_dir() / "pipeline_03.pack"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Commands, TrainIsDeterministicAndSeedOnlyMovesInit) {
  const auto dir = fresh_dir("train");
  const auto cfg = tiny_experiment();
  auto o = opts(dir);
  cmd_gen_data(cfg, o);
  TrainSelector sel;
  sel.normalization = "group";
  sel.run_id = "a";
  const auto a = cmd_train(cfg, o, sel);
  sel.run_id = "b";
  const auto b = cmd_train(cfg, o, sel);
  const Layout out{dir};
  EXPECT_EQ(io::read_file(out.run_dir("a") / "checkpoint.bin"), io::read_file(out.run_dir("b") / "checkpoint.bin"));
  auto ga = a.at("gap"), gb = b.at("gap");
  ga.erase("run_id");
  gb.erase("run_id");
  EXPECT_EQ(ga, gb);
  EXPECT_EQ(a.at("model_config").at("seed"), 22);

  o.seed = 4;
  sel.run_id.clear();
  const auto s4 = cmd_train(cfg, o, sel);
  EXPECT_EQ(s4.at("run_id"), "train_group_max_d0.5_b64_s4");
  EXPECT_EQ(s4.at("model_config").at("seed"), 4);
  EXPECT_EQ(s4.at("record").at("train_config").at("seed"), 22);
  EXPECT_NE(io::read_file(out.run_dir("a") / "checkpoint.bin"),
            io::read_file(out.run_dir("train_group_max_d0.5_b64_s4") / "checkpoint.bin"));

  sel.normalization = "weight";
  EXPECT_EQ(kind_of([&] { cmd_train(cfg, o, sel); }), ErrorKind::config);
  EXPECT_EQ(kind_of([&] { cmd_train(cfg, opts(fresh_dir("train_nodata")), TrainSelector{}); }), ErrorKind::data);
  fs::remove_all(dir);
}

TEST(Commands, SweepIndependentOfJobsAndResumable) {
  const auto d1 = fresh_dir("sweep1"), d3 = fresh_dir("sweep3");
  const auto cfg = tiny_experiment();
  const auto s1 = cmd_sweep(cfg, opts(d1, 1));
  EXPECT_EQ(s1.runs, 3u);
  EXPECT_EQ(s1.executed, 3u);
  cmd_sweep(cfg, opts(d3, 3));
  const std::set<std::string> skip = {"timing.json", "experiment.json"};
  const auto t1 = tree_bytes(d1, skip), t3 = tree_bytes(d3, skip);
  EXPECT_EQ(t1, t3);
  EXPECT_TRUE(t1.count("report/gap_records.csv"));
  EXPECT_TRUE(t1.count("runs/run_002/checkpoint.bin"));

  // Manifest content: resolved config, trace on the traced run only.
  const auto m0 = read_json(Layout{d1}.run_manifest("run_000"));
  EXPECT_EQ(m0.at("config"), nlohmann::json(cfg));
  EXPECT_EQ(m0.at("trace").size(), m0.at("record").at("history").size());
  EXPECT_TRUE(read_json(Layout{d1}.run_manifest("run_001")).at("trace").empty());
  EXPECT_FALSE(m0.at("record").contains("wall_seconds"));

  // Nothing reruns; a deleted run comes back byte-identical.
  const auto again = cmd_sweep(cfg, opts(d1, 1));
  EXPECT_EQ(again.executed, 0u);
  EXPECT_EQ(again.resumed, 3u);
  fs::remove_all(Layout{d1}.run_dir("run_001"));
  const auto partial = cmd_sweep(cfg, opts(d1, 1));
  EXPECT_EQ(partial.executed, 1u);
  EXPECT_EQ(tree_bytes(d1, skip), t1);

  // A changed training config does not silently mix with stored runs.
  auto other = cfg;
  other.train.lr = 2e-3;
  EXPECT_EQ(kind_of([&] { cmd_sweep(other, opts(d1, 1)); }), ErrorKind::config);
  fs::remove_all(d1);
  fs::remove_all(d3);
}

TEST(Commands, FailedRunsAreRecordedAndReportNeedsSuccesses) {
  const auto dir = fresh_dir("fail");
  auto cfg = tiny_experiment();
  cfg.train.lr = 1e12;  // diverges on the first steps
  cfg.train.momentum = 0.0;
  const Layout out{dir};
  const auto s = run_sweep(cfg, out, 1);
  EXPECT_EQ(s.runs, 3u);
  EXPECT_EQ(s.failed, 3u);
  const auto m = read_json(out.run_manifest("run_000"));
  EXPECT_EQ(m.at("status"), "failed");
  EXPECT_EQ(m.at("error").at("kind"), "numeric");
  EXPECT_NE(m.at("error").at("message").get<std::string>().find("non-finite"), std::string::npos);
  EXPECT_EQ(run_sweep(cfg, out, 1).resumed, 3u);

  const auto runs = collect_runs(out);
  ASSERT_EQ(runs.size(), 3u);
  for (const auto& r : runs) EXPECT_FALSE(r.ok);
  EXPECT_EQ(kind_of([&] { cmd_report(out, cfg.analysis); }), ErrorKind::data);
  EXPECT_FALSE(fs::exists(out.report_dir()));
  EXPECT_EQ(kind_of([&] { cmd_pick(out, cfg.analysis); }), ErrorKind::data);

  const auto empty = fresh_dir("empty");
  fs::create_directories(empty / "runs");
  EXPECT_EQ(kind_of([&] { cmd_report(Layout{empty}, cfg.analysis); }), ErrorKind::data);
  EXPECT_FALSE(fs::exists(Layout{empty}.report_dir()));
  fs::remove_all(dir);
  fs::remove_all(empty);
}

TEST(Pick, LargestMetricAmongConvergedWithTieBreaks) {
  const auto sel = MarginSelection::parse("first_last");
  std::vector<GapRecord> r = {record("run_000", 0.80, 5.0), record("run_001", 0.70, 50.0),
                              record("run_002", 0.90, 7.0), record("run_003", 0.75, 3.0)};
  auto p = pick_run(r, 0.75, 2, sel);
  EXPECT_EQ(p.run_id, "run_002");  // run_001 is above all but not converged
  EXPECT_EQ(p.metric, "M2/first_last");
  EXPECT_EQ(p.value, 7.0);
  EXPECT_EQ(p.candidates, 3u);

  r[0].metrics["M2/first_last"] = 7.0;  // tie on the metric: higher accuracy wins
  EXPECT_EQ(pick_run(r, 0.75, 2, sel).run_id, "run_002");
  r[0].source_accuracy = 0.90;  // tie on both: lower run id
  EXPECT_EQ(pick_run(r, 0.75, 2, sel).run_id, "run_000");
  r[0].metrics.erase("M2/first_last");  // records without the metric are skipped
  EXPECT_EQ(pick_run(r, 0.75, 2, sel).run_id, "run_002");

  EXPECT_EQ(kind_of([&] { pick_run(r, 0.95, 2, sel); }), ErrorKind::data);
  EXPECT_EQ(kind_of([&] { pick_run({}, 0.75, 2, sel); }), ErrorKind::data);
}

#ifdef MARGINPICK_CLI_PATH
namespace {
int cli(const std::string& args) {
  const int status = std::system(cat(MARGINPICK_CLI_PATH, " ", args, " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  fs::create_directories(dir);
  EXPECT_EQ(cli("--help"), 0);
  EXPECT_EQ(cli(""), 2);
  EXPECT_EQ(cli("bogus"), 2);
  EXPECT_EQ(cli("sweep --grid huge"), 2);
  EXPECT_EQ(cli("train --grid custom --out " + dir.string()), 2);
  EXPECT_EQ(cli("train --norm weight --out " + dir.string()), 2);
  EXPECT_EQ(cli("train --config /nonexistent.json"), 2);
  EXPECT_EQ(cli("train --out " + dir.string()), 3);
  EXPECT_EQ(cli("report " + dir.string()), 3);
  EXPECT_EQ(cli("pick -q " + dir.string()), 3);
  io::write_atomic(dir / "bad.json", "{\"version\": 1, \"grid\": 7}");
  EXPECT_EQ(cli("gen-data --config " + (dir / "bad.json").string()), 2);
  fs::remove_all(dir);
}
#endif
