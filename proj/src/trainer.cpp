#include "lengen/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace lengen {

double cosine_lr(long step, long total, double lr_base) {
  if (total <= 0 || step >= total) return 0.0;
  if (step <= 0) return lr_base;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr_base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename T>
void adamw_step(std::vector<NamedParam<T>>& params, OptimState<T>& state,
                const OptimConfig& config, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), T{0});
      state.v.emplace_back(p.tensor.size(), T{0});
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adamw_step: optimizer state does not match parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (!t.requires_grad || t.grad.size() != t.data.size()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const T decay = params[i].decay ? static_cast<T>(1.0 - lr * config.weight_decay) : T{1};
    for (std::size_t j = 0; j < t.data.size(); ++j) {
      const T g = t.grad[j];
      m[j] = b1 * m[j] + (T{1} - b1) * g;
      v[j] = b2 * v[j] + (T{1} - b2) * g * g;
      t.data[j] = t.data[j] * decay - step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

template <typename T>
double clip_grad_norm(std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params) {
      for (T& g : p.tensor.grad) g *= s;
    }
  }
  return norm;
}

long steps_per_epoch(std::size_t epoch_size, int batch) {
  if (batch < 1) throw std::invalid_argument("batch size must be >= 1");
  return static_cast<long>((epoch_size + static_cast<std::size_t>(batch) - 1) /
                           static_cast<std::size_t>(batch));
}

KeyValues task_metadata(const TaskSpec& task, int n_train) {
  return {{"task.kind", std::string(to_string(task.kind))},
          {"task.n_test", std::to_string(task.n_test)},
          {"task.n2_max", std::to_string(task.n2_max)},
          {"task.modulus", std::to_string(task.modulus)},
          {"task.n_train", std::to_string(n_train)}};
}

TaskSpec task_from_metadata(const KeyValues& kv) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::invalid_argument("metadata is missing " + k);
    return it->second;
  };
  return TaskSpec::make(parse_task_kind(get("task.kind")), std::stoi(get("task.n_test")),
                        std::stoi(get("task.n2_max")), std::stoull(get("task.modulus")));
}

namespace {

template <typename T>
void evaluate_into(RunRecord& rec, const Model<T>& model, const TaskSpec& task,
                   const Schedule& schedule, int n_train, std::uint64_t seed, int epoch,
                   long step) {
  if (schedule.eval_lengths.empty()) return;
  Rng rng = derive_rng(seed, streams::kEval + static_cast<std::uint64_t>(epoch));
  auto rows = length_profile(model, task, schedule.eval_lengths, schedule.N_test, rng, n_train);
  for (auto& r : rows) {
    r.step = step;
    r.epoch = epoch;
    if (schedule.log) {
      std::ostringstream os;
      os << "eval epoch=" << epoch << " step=" << step << " length=" << r.length
         << " exact_match=" << format_double(r.exact_match)
         << " malformed=" << format_double(r.malformed_rate);
      schedule.log(os.str());
    }
    rec.metrics.push_back(std::move(r));
  }
}

template <typename T>
void write_checkpoint(const Model<T>& model, const Schedule& schedule, const TaskSpec& task,
                      int n_train, const std::string& name, RunRecord& rec) {
  if (schedule.checkpoint_dir.empty()) return;
  std::filesystem::create_directories(schedule.checkpoint_dir);
  auto path = schedule.checkpoint_dir / name;
  auto meta = task_metadata(task, n_train);
  meta["run.seed"] = std::to_string(rec.seed);
  meta["run.steps"] = std::to_string(rec.steps);
  save_checkpoint(model, path, meta);
  rec.final_checkpoint = path;
}

}  // namespace

template <typename T>
TrainResult<T> train_on(Model<T> model, const TrainSet& data, int n_train,
                        const OptimConfig& optim, const Schedule& schedule,
                        std::uint64_t seed) {
  const TaskSpec& task = data.task();
  if (model.config().n_out != task.n_out()) {
    throw std::invalid_argument("train: model n_out " + std::to_string(model.config().n_out) +
                                " does not match task n_out " + std::to_string(task.n_out()));
  }
  if (schedule.epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (schedule.eval_every < 1) throw std::invalid_argument("train: eval_every must be >= 1");

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult<T> result{std::move(model), {}};
  Model<T>& m = result.model;
  RunRecord& rec = result.record;
  rec.seed = seed;
  if (data.priming()) rec.priming_hash = multiset_hash(data.priming()->fixed_examples);

  const std::size_t L = static_cast<std::size_t>(task.input_length());
  const long per_epoch = steps_per_epoch(data.epoch_size(), schedule.batch);
  const long total = per_epoch * schedule.epochs;
  Rng data_rng = derive_rng(seed, streams::kData);
  Rng drop_rng = derive_rng(seed, streams::kDropout);
  OptimState<T> state;

  if (schedule.eval_at_start) evaluate_into(rec, m, task, schedule, n_train, seed, 0, 0);

  std::vector<TokenId> ids, targets;
  std::vector<std::uint8_t> fixed_mask;
  for (int epoch = 1; epoch <= schedule.epochs && !rec.diverged; ++epoch) {
    auto examples = data.epoch(data_rng, &fixed_mask);
    std::vector<Example> fixed_seen;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (fixed_mask[i]) fixed_seen.push_back(examples[i]);
    }
    double loss_sum = 0;
    long batches = 0;
    double lr = 0;
    for (std::size_t start = 0; start < examples.size(); start += schedule.batch) {
      const std::size_t b =
          std::min<std::size_t>(static_cast<std::size_t>(schedule.batch), examples.size() - start);
      ids.clear();
      targets.clear();
      for (std::size_t i = 0; i < b; ++i) {
        auto enc = encode_example(examples[start + i], task);
        ids.insert(ids.end(), enc.input.begin(), enc.input.end());
        targets.insert(targets.end(), enc.target.begin(), enc.target.end());
      }
      m.zero_grad();
      Graph<T> g;
      ForwardOptions<T> opts;
      opts.training = true;
      opts.dropout_rng = &drop_rng;
      auto logits = m.forward(g, ids, b, L, opts);
      auto loss = g.cross_entropy(logits, targets);
      const double lv = static_cast<double>(g.value(loss).data[0]);
      if (!std::isfinite(lv)) {
        rec.diverged = true;
        rec.diagnostic = "non-finite loss at step " + std::to_string(rec.steps) + " (epoch " +
                         std::to_string(epoch) + ")";
        if (schedule.log) schedule.log(rec.diagnostic);
        break;
      }
      g.backward(loss);
      if (optim.grad_clip > 0) clip_grad_norm(m.params(), optim.grad_clip);
      lr = cosine_lr(rec.steps, total, optim.lr);
      adamw_step(m.params(), state, optim, lr);
      rec.lr_trace.push_back(lr);
      ++rec.steps;
      loss_sum += lv;
      ++batches;
    }
    if (rec.diverged) break;
    EpochRecord er;
    er.epoch = epoch;
    er.step = rec.steps;
    er.lr = lr;
    er.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    er.fixed_hash = multiset_hash(fixed_seen);
    rec.epochs.push_back(er);
    if (schedule.log) {
      std::ostringstream os;
      os << "epoch " << epoch << " step=" << rec.steps << " loss=" << er.loss << " lr=" << lr;
      schedule.log(os.str());
    }
    if (epoch % schedule.eval_every == 0 || epoch == schedule.epochs) {
      evaluate_into(rec, m, task, schedule, n_train, seed, epoch, rec.steps);
    }
    if (schedule.checkpoint_every > 0 && epoch % schedule.checkpoint_every == 0) {
      write_checkpoint(m, schedule, task, n_train, "epoch_" + std::to_string(epoch) + ".ckpt",
                       rec);
    }
  }
  write_checkpoint(m, schedule, task, n_train, "final.ckpt", rec);
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

template <typename T>
TrainResult<T> train(const TrainPlan& plan, ModelConfig model_config, const OptimConfig& optim,
                     const Schedule& schedule) {
  plan.validate();
  if (plan.procedure == Procedure::fine_tune) {
    throw std::invalid_argument("train: fine-tune plans start from a trained model");
  }
  model_config.n_out = plan.task.n_out();
  model_config.validate();
  if (model_config.pe == PeKind::ape && plan.task.input_length() > model_config.max_positions) {
    throw std::invalid_argument("train: input length " + std::to_string(plan.task.input_length()) +
                                " exceeds model.max_positions " +
                                std::to_string(model_config.max_positions));
  }
  TrainSet data = make_train_set(plan);
  auto model = Model<T>::init(model_config, plan.seed);
  auto result = train_on(std::move(model), data, plan.n_train, optim, schedule, plan.seed);
  result.record.config = model_config.to_kv();
  return result;
}

template <typename T>
TrainResult<T> fine_tune(Model<T> model, const TaskSpec& source_task, const TrainPlan& plan,
                         const OptimConfig& optim, Schedule schedule) {
  plan.validate();
  if (plan.procedure != Procedure::fine_tune || !plan.fine_tune) {
    throw std::invalid_argument("fine_tune: plan procedure must be fine_tune");
  }
  if (source_task.input_length() != plan.task.input_length() ||
      source_task.n_out() != plan.task.n_out() || source_task.kind != plan.task.kind) {
    throw std::invalid_argument("fine_tune: model was trained on a task with a different "
                                "geometry (input length " +
                                std::to_string(source_task.input_length()) + ", n_out " +
                                std::to_string(source_task.n_out()) + ")");
  }
  for (int n : {plan.n_train, plan.fine_tune->n_target}) {
    if (std::find(schedule.eval_lengths.begin(), schedule.eval_lengths.end(), n) ==
        schedule.eval_lengths.end()) {
      schedule.eval_lengths.push_back(n);
    }
  }
  TrainSet data = make_train_set(plan);
  auto result = train_on(std::move(model), data, plan.n_train, optim, schedule, plan.seed);
  result.record.config = result.model.config().to_kv();
  result.record.config["finetune.source_length"] = std::to_string(plan.n_train);
  result.record.config["finetune.target_length"] = std::to_string(plan.fine_tune->n_target);
  return result;
}

#define LENGEN_INSTANTIATE(T)                                                                   \
  template void adamw_step(std::vector<NamedParam<T>>&, OptimState<T>&, const OptimConfig&,   \
                           double);                                                            \
  template double clip_grad_norm(std::vector<NamedParam<T>>&, double);                         \
  template TrainResult<T> train_on(Model<T>, const TrainSet&, int, const OptimConfig&,         \
                                   const Schedule&, std::uint64_t);                            \
  template TrainResult<T> train(const TrainPlan&, ModelConfig, const OptimConfig&,             \
                                const Schedule&);                                              \
  template TrainResult<T> fine_tune(Model<T>, const TaskSpec&, const TrainPlan&,               \
                                    const OptimConfig&, Schedule);

LENGEN_INSTANTIATE(float)
LENGEN_INSTANTIATE(double)

#undef LENGEN_INSTANTIATE

}  // namespace lengen
