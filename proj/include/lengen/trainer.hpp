#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lengen/analysis.hpp"
#include "lengen/model.hpp"
#include "lengen/task.hpp"

namespace lengen {

/// Random streams derived from a run's master seed.
namespace streams {
inline constexpr std::uint64_t kData = 0x64617461;
inline constexpr std::uint64_t kDropout = 0x64726f70;
/// Evaluation after epoch e uses stream kEval + e.
inline constexpr std::uint64_t kEval = 0x6576616c00000000ull;
}  // namespace streams

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
};

template <typename T>
struct OptimState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  long step = 0;
};

/// lr_base * 0.5 * (1 + cos(pi * step / total)), clamped at step >= total.
double cosine_lr(long step, long total, double lr_base);

/// One AdamW update with bias correction. Decay is decoupled
/// (p -= lr * wd * p) and applied only to parameters marked `decay`.
template <typename T>
void adamw_step(std::vector<NamedParam<T>>& params, OptimState<T>& state,
                const OptimConfig& config, double lr);

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<NamedParam<T>>& params, double max_norm);

struct Schedule {
  int epochs = 15000;
  int batch = 32;
  /// Evaluate every this many epochs (and before the first and after the
  /// last epoch).
  int eval_every = 25;
  std::vector<int> eval_lengths;
  int N_test = 10000;
  bool eval_at_start = true;
  /// Write a checkpoint every this many epochs; 0 disables periodic saves.
  int checkpoint_every = 0;
  /// Directory for checkpoints; empty disables all checkpoint writes.
  std::filesystem::path checkpoint_dir;
  /// Receives one line per epoch and per evaluation.
  std::function<void(const std::string&)> log;
};

struct EpochRecord {
  int epoch = 0;
  long step = 0;  // steps completed at the end of the epoch
  double lr = 0;  // learning rate of the last step
  double loss = 0;
  /// Multiset hash of the fixed examples seen this epoch.
  std::uint64_t fixed_hash = 0;
};

struct RunRecord {
  std::string run_id;
  KeyValues config;
  std::uint64_t seed = 0;
  std::vector<MetricRow> metrics;
  std::vector<EpochRecord> epochs;
  long steps = 0;
  double wall_seconds = 0;
  bool diverged = false;
  std::string diagnostic;
  std::optional<std::uint64_t> priming_hash;
  std::filesystem::path final_checkpoint;
  /// Learning rate of every optimizer step, in order.
  std::vector<double> lr_trace;
};

template <typename T>
struct TrainResult {
  Model<T> model;
  RunRecord record;
};

/// Steps per epoch: ceil(epoch_size / batch).
long steps_per_epoch(std::size_t epoch_size, int batch);

/// Trains `model` on `data`. The cosine horizon is epochs * steps_per_epoch.
/// Stops early, with `diverged` set, on a non-finite loss.
template <typename T>
TrainResult<T> train_on(Model<T> model, const TrainSet& data, int n_train,
                        const OptimConfig& optim, const Schedule& schedule,
                        std::uint64_t seed);

/// Builds the training set and a fresh model from the plan, then trains.
template <typename T>
TrainResult<T> train(const TrainPlan& plan, ModelConfig model_config,
                     const OptimConfig& optim, const Schedule& schedule);

/// Continues training a model trained at the plan's n_train on N_fine fixed
/// examples of length n_target. `source_task` is the task the model was
/// trained on; its input length and n_out must match the plan's task.
template <typename T>
TrainResult<T> fine_tune(Model<T> model, const TaskSpec& source_task,
                         const TrainPlan& plan, const OptimConfig& optim,
                         Schedule schedule);

/// Task geometry stored in checkpoint metadata.
KeyValues task_metadata(const TaskSpec& task, int n_train);
TaskSpec task_from_metadata(const KeyValues& kv);

}  // namespace lengen
