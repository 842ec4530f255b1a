#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "marginpick/experiment/commands.hpp"
#include "marginpick/verify/oracles.hpp"

using namespace mp;

namespace {

struct Flags {
  std::string config, out, grid, scale = "desk";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool quiet = false, verbose = false;
};

CommandOptions to_options(const Flags& f, const CLI::App& sub) {
  CommandOptions o;
  o.config = f.config;
  o.out = f.out;
  o.jobs = std::max<std::size_t>(1, f.jobs);
  o.scale = parse_scale(f.scale);
  if (!f.grid.empty()) o.grid = parse_grid(f.grid);
  if (const auto* s = sub.get_option_no_throw("--seed"); s && s->count()) o.seed = f.seed;
  return o;
}

void add_common(CLI::App& sub, Flags& f, bool with_grid) {
  sub.add_option("--config", f.config, "experiment config (JSON)");
  sub.add_option("--out", f.out, "output root (default: config output, then $MARGINPICK_OUT, then ./marginpick-out)");
  sub.add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
  sub.add_option("--scale", f.scale, "preset scale when no config is given")->check(CLI::IsMember({"desk", "paper"}));
  if (with_grid)
    sub.add_option("--grid", f.grid, "model grid preset")->check(CLI::IsMember({"paper", "desk", "smoke", "custom"}));
}

int run_verify(const std::string& only) {
  int failed = 0;
  for (const auto& c : verify::oracle_suite()) {
    if (!only.empty() && c.name != only) continue;
    const auto r = verify::run_check(c.fn, c.name);
    std::printf("[%s] %s: %s (%.1f s)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(), r.seconds);
    std::fflush(stdout);
    failed += !r.passed;
  }
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train splicing detectors over a hyperparameter grid, measure latent margins and "
               "generalization gaps, and pick the run with the largest margins."};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_flag("-q,--quiet", f.quiet, "warnings and errors only");
  app.add_flag("-v,--verbose", f.verbose, "debug output");

  auto* gen = app.add_subcommand("gen-data", "generate the scene store, source patches and target sets");
  add_common(*gen, f, false);
  gen->add_option("--seed", f.seed, "data seed");

  auto* tr = app.add_subcommand("train", "train one configuration on the generated data");
  add_common(*tr, f, true);
  tr->add_option("--seed", f.seed, "initialization seed (default 22)");
  TrainSelector sel;
  std::string norm, pool, run_id;
  double dropout = 0;
  std::size_t batch = 0, index = 0;
  tr->add_option("--run", index, "take the configuration at this grid index");
  tr->add_option("--norm", norm, "instance, batch, layer, local_response or group");
  tr->add_option("--pool", pool, "average or max");
  tr->add_option("--dropout", dropout, "dropout rate");
  tr->add_option("--batch-size", batch, "batch size");
  tr->add_option("--id", run_id, "run directory name");

  auto* sw = app.add_subcommand("sweep", "train every grid configuration, then write the report");
  add_common(*sw, f, true);
  sw->add_option("--seed", f.seed, "initialization and training seed of every run (default 22)");

  auto* rep = app.add_subcommand("report", "quantile curves, impact table and correlations from run manifests");
  add_common(*rep, f, false);
  std::string dir;
  rep->add_option("dir", dir, "output root holding runs/ (default --out)");

  auto* pk = app.add_subcommand("pick", "print the converged run with the largest margin metric");
  add_common(*pk, f, false);
  pk->add_option("dir", dir, "output root holding runs/ (default --out)");
  double alpha = 0;
  std::string selection;
  pk->add_option("--alpha", alpha, "metric exponent (default 2)");
  pk->add_option("--selection", selection, "all, first_last or L<k> (default first_last)");
  bool json_out = false;
  pk->add_flag("--json", json_out, "print the full pick record");

  auto* ver = app.add_subcommand("verify", "run the oracle checks");
  std::string only;
  ver->add_option("--only", only, "run a single check by name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::config);
  }
  if (f.quiet) log::set_level(log::Level::warn);
  if (f.verbose) log::set_level(log::Level::debug);

  try {
    if (*ver) return run_verify(only);
    CLI::App* sub = app.get_subcommands().front();
    CommandOptions o = to_options(f, *sub);
    if (!dir.empty()) o.out = dir;

    if (*gen) {
      const auto m = cmd_gen_data(resolve_config(o), o);
      std::cout << m.at("packs").dump(2) << "\n";
    } else if (*tr) {
      if (tr->count("--run")) sel.grid_index = index;
      if (!norm.empty()) sel.normalization = norm;
      if (!pool.empty()) sel.pooling = pool;
      if (tr->count("--dropout")) sel.dropout_rate = dropout;
      if (tr->count("--batch-size")) sel.batch_size = batch;
      sel.run_id = run_id;
      const auto m = cmd_train(resolve_config(o), o, sel);
      std::cout << m.at("run_id").get<std::string>() << " source accuracy "
                << m.at("record").at("source_test_accuracy").get<double>() << " mean gap "
                << m.at("gap").at("mean_gap").get<double>() << " pp\n";
    } else if (*sw) {
      const auto s = cmd_sweep(resolve_config(o), o);
      std::cout << s.runs << " runs: " << s.executed << " executed, " << s.resumed << " resumed, " << s.failed
                << " failed\n";
      return 0;
    } else if (*rep) {
      const Layout out{io::output_root(o.out)};
      const auto files = cmd_report(out, stored_analysis(o, out));
      for (const auto& [name, bytes] : files) std::cout << (out.report_dir() / name).string() << "\n";
    } else if (*pk) {
      const Layout out{io::output_root(o.out)};
      AnalysisConfig a = stored_analysis(o, out);
      if (pk->count("--alpha")) a.pick_alpha = alpha;
      if (!selection.empty()) a.pick_selection = selection;
      a.validate();
      const auto p = cmd_pick(out, a);
      if (json_out) {
        std::cout << nlohmann::json(p).dump(2) << "\n";
      } else {
        std::cout << p.run_id << "\n";
      }
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
