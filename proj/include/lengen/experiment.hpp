#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lengen/analysis.hpp"
#include "lengen/model.hpp"
#include "lengen/task.hpp"
#include "lengen/trainer.hpp"

namespace lengen {

enum class Precision { f32, f64 };
std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

/// A configuration error tied to one key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

using LogFn = std::function<void(const std::string&)>;

/// Parses "1,2,5" and ranges "6-20" (mixed: "1-3,7").
std::vector<int> parse_int_list(std::string_view text);

/// Flat dotted key-value experiment description.
///
/// Every key has a default; unknown keys are rejected. `scale` multiplies
/// d_model (rounded to a multiple of the head count), N_train and epochs.
class ExperimentConfig {
 public:
  ExperimentConfig();

  /// Defaults overlaid with a named preset.
  static ExperimentConfig preset(std::string_view name);
  static std::vector<std::string> preset_names();
  /// Reads "key = value" lines; '#' starts a comment. A `preset` key, if
  /// present, is applied first.
  static ExperimentConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.contains(key); }
  const KeyValues& values() const { return values_; }

  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  TaskSpec task() const;
  std::vector<int> eval_lengths() const;
  TrainPlan plan() const;
  ModelConfig model() const;
  OptimConfig optim() const;
  Schedule schedule() const;
  Precision precision() const;

  /// Throws ConfigError naming the first offending key.
  void validate() const;

  /// One "key = value" line per key, sorted.
  std::string dump() const;
  void save(const std::filesystem::path& path) const;

 private:
  KeyValues values_;
};

struct RunManifest {
  KeyValues config;
  std::string code_version;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::string status;  // ok | diverged | failed
  std::string diagnostic;
  std::map<std::string, std::string> artifacts;
};

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

std::string code_version();

struct RunOutcome {
  std::filesystem::path dir;
  RunManifest manifest;
  RunRecord record;
};

/// Trains (or fine-tunes, when train.procedure = fine_tune) per the config
/// and writes config.txt, manifest.json, metrics.csv, epochs.csv and
/// checkpoints into `out_dir`.
RunOutcome cmd_train(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                     const LogFn& log = {});

struct EvalOptions {
  std::vector<int> lengths;
  int N_test = 10000;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  bool failure_report = false;
  bool write_predictions = false;
  std::string run_id = "eval";
};

/// Length profile of a checkpoint; writes metrics.csv and, on request,
/// failure.csv and predictions_<n>.tsv into `out_dir`.
std::vector<MetricRow> cmd_eval(const std::filesystem::path& checkpoint, const EvalOptions& opts,
                                const std::filesystem::path& out_dir, const LogFn& log = {});

/// Writes the materialized datasets of a config: train_epoch1.tsv (the
/// first epoch as presented), fixed.tsv (priming or fine-tune examples)
/// and eval_<n>.tsv for every evaluation length.
void cmd_gen(const ExperimentConfig& config, const std::filesystem::path& out_dir);

/// Recomputes a failure report from a predictions file (x1, x2, y, then
/// space-separated predicted tokens). Carry buckets are emitted for
/// addition-family tasks only.
FailureReport cmd_report(const std::filesystem::path& predictions, const TaskSpec& task,
                         const std::filesystem::path& failure_csv,
                         const std::string& run_id = "report");

void write_predictions_tsv(const std::filesystem::path& path, std::span<const Example> examples,
                           const TokenMatrix& preds);

// ---------------------------------------------------------------------------
// Sweeps

/// Bisection over train.priming_rate for the smallest rate whose mean
/// final accuracy at `target_length` reaches `accuracy`.
struct PrimingSearch {
  double lo = 0.0;
  double hi = 0.1;
  double step = 0.005;
  int target_length = 0;
  double accuracy = 0.9;
};

struct SweepSpec {
  ExperimentConfig base;
  /// Axis key -> values; the cross product defines the cells.
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::vector<std::uint64_t> seeds{0};
  int workers = 1;
  double threshold = 0.75;
  std::optional<PrimingSearch> priming_search;
};

/// Sweep file: config lines for the base, plus "sweep.axis.<key> = a,b,c",
/// "sweep.seeds = 1,2,3", "sweep.workers = N", "sweep.threshold = x".
/// Any "search.priming.{lo,hi,step,target_length,accuracy}" key turns each
/// cell into a priming-rate search.
SweepSpec load_sweep(const std::filesystem::path& path);

struct SweepCell {
  KeyValues assignment;
  std::vector<std::filesystem::path> run_dirs;
  std::vector<std::string> errors;
  /// Length -> mean final exact match over successful seeds.
  std::map<int, double> mean_accuracy;
  std::optional<int> threshold_length;
  /// Set by a priming search: the smallest successful rate, if any.
  std::optional<double> min_priming_rate;
  bool searched = false;
};

/// Runs every (cell, seed) pair, writes sweep.csv (per cell and length)
/// and thresholds.csv (plus priming_search.csv for searches), and returns
/// the cells. Failing runs are recorded and
/// do not stop the sweep.
std::vector<SweepCell> cmd_sweep(const SweepSpec& spec, const std::filesystem::path& out_dir,
                                 const LogFn& log = {});

/// Largest length whose accuracy is at least `threshold`.
std::optional<int> threshold_length(const std::map<int, double>& accuracy_by_length,
                                    double threshold);

/// Final-evaluation exact match per length, averaged over the given runs.
std::map<int, double> mean_final_accuracy(std::span<const MetricsTable> runs);

/// Smallest rate in [lo, hi] meeting `success`, assuming success is monotone
/// in the rate. Bisects until the bracket is at most `step` wide and returns
/// its upper end; nullopt when even `hi` fails.
std::optional<double> bisect_priming_rate(const std::function<bool(double)>& success, double lo,
                                          double hi, double step);

}  // namespace lengen
