#include <cstdio>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lengen/experiment.hpp"

namespace fs = std::filesystem;
using namespace lengen;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  fs::path out = "out";
  std::optional<std::string> precision;
  bool quiet = false;
};

LogFn stderr_log(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& line) { std::cerr << line << '\n'; };
}

// Options shared by the subcommands that take an experiment config. Every
// config key is also available as --<key>.
struct ConfigOptions {
  std::string config_path;
  std::string preset;
  std::vector<std::string> sets;
  std::map<std::string, std::string> keyed;
  std::map<std::string, CLI::Option*> keyed_opts;

  void attach(CLI::App* app) {
    app->add_option("--config,-c", config_path, "Config file (key = value lines)")
        ->check(CLI::ExistingFile);
    app->add_option("--preset,-p", preset, "Named preset (see --list-presets)");
    app->add_option("--set", sets, "Override a key: --set key=value (repeatable)");
    auto* group = app->add_option_group("config keys", "Every config key as a flag");
    const ExperimentConfig defaults;
    for (const auto& [key, value] : defaults.values()) {
      keyed_opts[key] = group->add_option("--" + key, keyed[key], "default: " + value);
    }
  }

  ExperimentConfig resolve(const Globals& g) const {
    if (!config_path.empty() && !preset.empty()) {
      throw ConfigError("preset", "use either --config or --preset, not both");
    }
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = ExperimentConfig::load(config_path);
    else if (!preset.empty()) cfg = ExperimentConfig::preset(preset);
    for (const auto& [key, opt] : keyed_opts) {
      if (opt->count() > 0) cfg.set(key, keyed.at(key));
    }
    for (const auto& kv : sets) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError(kv, "--set expects key=value");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (g.seed) cfg.set("data.seed", std::to_string(*g.seed));
    if (g.precision) cfg.set("train.precision", *g.precision);
    return cfg;
  }
};

TaskSpec task_for_report(const std::string& checkpoint, const std::string& kind, int n_test,
                         int n2_max, std::uint64_t modulus) {
  if (!checkpoint.empty()) return task_from_metadata(read_checkpoint_header(checkpoint));
  if (kind.empty() || n_test < 1) {
    throw std::invalid_argument("report: give --checkpoint, or --task with --n-test");
  }
  return TaskSpec::make(parse_task_kind(kind), n_test, n2_max, modulus);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Length generalization experiments for arithmetic transformers", "lengen"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed (overrides data.seed)");
  app.add_option("--out,-o", g.out, "Output directory");
  app.add_option("--precision", g.precision, "Arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("--quiet,-q", g.quiet, "Suppress progress output");
  bool list_presets = false;
  app.add_flag("--list-presets", list_presets, "Print preset names and exit");

  auto* gen = app.add_subcommand("gen", "Write the datasets a config would use");
  ConfigOptions gen_opts;
  gen_opts.attach(gen);

  auto* train = app.add_subcommand("train", "Train (or fine-tune) a model");
  ConfigOptions train_opts;
  train_opts.attach(train);
  bool dry_run = false;
  train->add_flag("--dry-run", dry_run, "Validate and print the resolved config only");

  auto* eval = app.add_subcommand("eval", "Length profile of a checkpoint");
  std::string eval_checkpoint;
  std::string eval_lengths;
  int eval_n = 10000;
  bool eval_failures = false, eval_predictions = false;
  std::string eval_run_id = "eval";
  eval->add_option("checkpoint", eval_checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--lengths,-l", eval_lengths, "Lengths, e.g. 6-20 or 3,5,9 (default: all)");
  eval->add_option("--n-test,-n", eval_n, "Examples per length")->check(CLI::PositiveNumber);
  eval->add_flag("--failure-report", eval_failures, "Also write failure.csv");
  eval->add_flag("--predictions", eval_predictions, "Also write predictions_<n>.tsv");
  eval->add_option("--run-id", eval_run_id, "Run id column value");

  auto* sweep = app.add_subcommand("sweep", "Run a sweep over config axes and seeds");
  std::string sweep_file;
  std::optional<int> sweep_workers;
  sweep->add_option("sweep_file", sweep_file, "Sweep file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--workers,-j", sweep_workers, "Parallel runs")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Failure report from saved predictions");
  std::string report_predictions, report_checkpoint, report_kind;
  int report_n_test = 0, report_n2 = 3;
  std::uint64_t report_modulus = 0;
  std::string report_run_id = "report";
  report->add_option("predictions", report_predictions, "predictions_<n>.tsv from eval")
      ->required()
      ->check(CLI::ExistingFile);
  report->add_option("--checkpoint", report_checkpoint, "Take the task geometry from here")
      ->check(CLI::ExistingFile);
  report->add_option("--task", report_kind, "Task kind when no checkpoint is given");
  report->add_option("--n-test", report_n_test, "Operand width");
  report->add_option("--n2-max", report_n2, "Second operand width for multiplication");
  report->add_option("--modulus", report_modulus, "Modulus for modular tasks");
  report->add_option("--run-id", report_run_id, "Run id column value");

  CLI11_PARSE(app, argc, argv);

  if (list_presets) {
    for (const auto& name : ExperimentConfig::preset_names()) std::cout << name << '\n';
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return 0;
  }

  try {
    if (gen->parsed()) {
      cmd_gen(gen_opts.resolve(g), g.out);
      std::cout << g.out.string() << '\n';
    } else if (train->parsed()) {
      auto cfg = train_opts.resolve(g);
      if (dry_run) {
        cfg.validate();
        std::cout << cfg.dump();
        return 0;
      }
      auto outcome = cmd_train(cfg, g.out, stderr_log(g));
      std::cout << outcome.dir.string() << '\n';
      if (outcome.record.diverged) {
        std::cerr << "diverged: " << outcome.record.diagnostic << '\n';
        return 3;
      }
    } else if (eval->parsed()) {
      EvalOptions opts;
      opts.lengths = parse_int_list(eval_lengths);
      opts.N_test = eval_n;
      opts.seed = g.seed.value_or(0);
      opts.precision = parse_precision(
          g.precision.value_or(read_checkpoint_header(eval_checkpoint).at("dtype")));
      opts.failure_report = eval_failures;
      opts.write_predictions = eval_predictions;
      opts.run_id = eval_run_id;
      cmd_eval(eval_checkpoint, opts, g.out, stderr_log(g));
      std::cout << (g.out / "metrics.csv").string() << '\n';
    } else if (sweep->parsed()) {
      auto spec = load_sweep(sweep_file);
      if (sweep_workers) spec.workers = *sweep_workers;
      if (g.precision) spec.base.set("train.precision", *g.precision);
      auto cells = cmd_sweep(spec, g.out, stderr_log(g));
      std::size_t failed = 0;
      for (const auto& c : cells) failed += c.errors.size();
      std::cout << (g.out / "sweep.csv").string() << '\n';
      if (failed > 0) std::cerr << failed << " run(s) failed; see thresholds.csv\n";
    } else if (report->parsed()) {
      auto task = task_for_report(report_checkpoint, report_kind, report_n_test, report_n2,
                                  report_modulus);
      fs::create_directories(g.out);
      auto rep = cmd_report(report_predictions, task, g.out / "failure.csv", report_run_id);
      std::cout << "wrong " << rep.wrong << " of " << rep.total << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
