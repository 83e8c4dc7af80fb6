// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: data generation, training, evaluation, ablation
// grids, gradient checks and reports. Relative output paths resolve against
// $ODDETR_OUT (default: ./runs).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "oddetr/oddetr.hpp"

namespace fs = std::filesystem;
using namespace oddetr;

namespace {

fs::path output_path(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  const char* root = std::getenv("ODDETR_OUT");
  return fs::path(root && *root ? root : "runs") / path;
}

TrainConfig config_or_default(const std::string& path) { return path.empty() ? TrainConfig{} : load_config(path); }

/// Scenes from a JSON-lines file, or from val.jsonl inside a directory.
std::vector<Scene> load_scenes(const std::string& where) {
  fs::path p(where);
  if (fs::is_directory(p)) p /= "val.jsonl";
  return read_scenes_jsonl(p.string());
}

int run_generate(std::uint64_t seed, const std::string& out, const std::string& config) {
  TrainConfig cfg = config_or_default(config);
  cfg.data.seed = seed;
  const fs::path dir = output_path(out);
  fs::create_directories(dir);
  const auto train = generate_split(cfg.data, Split::train, cfg.data.train_scenes);
  const auto val = generate_split(cfg.data, Split::val, cfg.data.val_scenes);
  write_scenes_jsonl((dir / "train.jsonl").string(), train);
  write_scenes_jsonl((dir / "val.jsonl").string(), val);
  std::ofstream(dir / "data.ini") << to_ini(cfg);
  std::printf("wrote %zu train and %zu val scenes to %s\n", train.size(), val.size(), dir.string().c_str());
  return 0;
}

int run_train(const std::string& config, const std::string& out, bool quiet) {
  const TrainConfig cfg = config_or_default(config);
  TrainOptions opts;
  opts.out_dir = output_path(out);
  opts.verbose = !quiet;
  const RunRecord rec = train(cfg, opts);
  const auto& last = rec.rows.back();
  std::printf("final ap %.4f  ap50 %.4f  (%.1f s)  -> %s\n", last.ap, last.ap50, rec.wall_seconds,
              opts.out_dir->string().c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto scenes = load_scenes(data);
  const auto samples = render_all(scenes, ck.config.data);
  const Evaluation ev = evaluate_model(ck.params, samples, ck.config.cost, static_cast<int>(samples.size()));
  nlohmann::json j{{"role", ck.role}, {"scenes", samples.size()}, {"ap", ev.ap.ap}, {"ap50", ev.ap.ap50}};
  std::cout << j.dump() << '\n';
  return 0;
}

int run_ablate(const std::string& preset, int seeds, const std::string& config, int jobs, const std::string& out) {
  const TrainConfig base = config_or_default(config);
  AblationOptions opts;
  opts.seeds = seeds;
  opts.jobs = jobs;
  opts.out_root = output_path(out);
  opts.verbose = true;
  const auto runs = ablate(make_preset(preset), base, opts);
  const fs::path dir = *opts.out_root / preset;
  std::ofstream(dir / "summary.csv") << summaries_csv(runs);
  const std::string table = comparison_table(runs);
  std::ofstream(dir / "table.md") << table;
  std::cout << table;
  return 0;
}

int run_gradcheck(const std::string& config, int params, std::uint64_t seed) {
  const TrainConfig cfg = config_or_default(config);
  GradcheckOptions opts;
  opts.n_params = params;
  opts.seed = seed;
  const GradcheckReport rep = gradcheck(cfg, opts);
  for (const auto& e : rep.entries)
    std::printf("%-22s %7zu  analytic % .10e  numeric % .10e  rel %.3e\n", e.tensor.c_str(), e.index, e.analytic,
                e.numeric, e.rel_err);
  std::printf("loss %.10f  max rel err %.3e\n", rep.loss, rep.max_rel_err);
  return 0;
}

int run_report(const std::string& runs_dir, const std::string& csv_out) {
  const auto runs = scan_runs(runs_dir);
  if (runs.empty()) throw std::runtime_error("no runs under " + runs_dir);
  std::cout << comparison_table(summarize_runs(runs));
  const fs::path csv = csv_out.empty() ? fs::path(runs_dir) / "curves.csv" : fs::path(csv_out);
  std::ofstream(csv) << curves_csv(runs);
  std::cout << "\ncurves: " << csv.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online-distillation training lab for a small query-based detector"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out, config, checkpoint, data, preset, runs, csv;
  int seeds = 4, jobs = 1, params = 32;
  bool quiet = false;

  auto* gen = app.add_subcommand("generate-data", "Write train/val scene files");
  gen->add_option("--seed", seed, "Dataset seed")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--config", config, "Config whose [data] section to use");

  auto* tr = app.add_subcommand("train", "Train one configuration");
  tr->add_option("--config", config, "INI config (defaults when omitted)");
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_flag("--quiet", quiet, "No per-epoch progress");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Scenes (.jsonl or a generate-data directory)")->required();

  auto* ab = app.add_subcommand("ablate", "Run an ablation preset over seeds");
  ab->add_option("--preset", preset, "Preset name")->required()->check(CLI::IsMember(preset_names()));
  ab->add_option("--seeds", seeds, "Seeds per row")->check(CLI::PositiveNumber);
  ab->add_option("--config", config, "Base config");
  ab->add_option("--jobs", jobs, "Parallel runs (ignored in reference mode)")->check(CLI::PositiveNumber);
  ab->add_option("--out", out, "Output root")->default_val("ablations");

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and central-difference gradients");
  gc->add_option("--config", config, "INI config");
  gc->add_option("--params", params, "Number of sampled parameters")->check(CLI::PositiveNumber);
  gc->add_option("--seed", seed, "Sampling seed");

  auto* rp = app.add_subcommand("report", "Summarize run directories");
  rp->add_option("--runs", runs, "Root directory to scan")->required();
  rp->add_option("--csv", csv, "Where to write plot-ready curves");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return run_generate(seed, out, config);
    if (*tr) return run_train(config, out, quiet);
    if (*ev) return run_eval(checkpoint, data);
    if (*ab) return run_ablate(preset, seeds, config, jobs, out);
    if (*gc) return run_gradcheck(config, params, seed);
    if (*rp) return run_report(runs, csv);
  } catch (const InvariantViolation& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
