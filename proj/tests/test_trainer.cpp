#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "lengen/trainer.hpp"
#include "support/model_gradcheck.hpp"

using namespace lengen;

namespace {

ModelConfig small_model(PeKind pe = PeKind::rpe_k) {
  ModelConfig c;
  c.depth = 1;
  c.d_model = 16;
  c.heads = 2;
  c.pe = pe;
  c.max_positions = 32;
  return c;
}

Schedule quiet_schedule(int epochs) {
  Schedule s;
  s.epochs = epochs;
  s.batch = 16;
  s.eval_every = 1;
  s.N_test = 50;
  return s;
}

}  // namespace

TEST(CosineLr, EndpointsAndMonotone) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3), 1e-3);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-3), 5e-4, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(100, 100, 1e-3), 0.0);
  EXPECT_DOUBLE_EQ(cosine_lr(150, 100, 1e-3), 0.0);
  double prev = 1;
  for (long s = 0; s <= 100; ++s) {
    double lr = cosine_lr(s, 100, 1e-3);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(AdamW, ScalarHandCalculation) {
  // One scalar, g = 0.5, lr = 0.1, wd = 0.01, two steps.
  std::vector<NamedParam<double>> params;
  params.push_back({"w", Tensor<double>({1}, std::vector<double>{2.0}, true), true});
  OptimConfig cfg;
  cfg.weight_decay = 0.01;
  OptimState<double> st;
  params[0].tensor.grad = {0.5};
  adamw_step(params, st, cfg, 0.1);
  // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25 -> update = 0.1 * 0.5 / (0.5 + 1e-8)
  const double after1 = 2.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
  EXPECT_NEAR(params[0].tensor.data[0], after1, 1e-15);

  params[0].tensor.grad = {-1.0};
  adamw_step(params, st, cfg, 0.1);
  const double m = 0.9 * 0.05 + 0.1 * -1.0;
  const double v = 0.999 * 0.00025 + 0.001 * 1.0;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
  const double after2 = after1 * (1 - 0.001) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(params[0].tensor.data[0], after2, 1e-12);
}

TEST(AdamW, DecayOnlyOnFlaggedParameters) {
  std::vector<NamedParam<double>> params;
  params.push_back({"decayed", Tensor<double>({1}, std::vector<double>{1.0}, true), true});
  params.push_back({"plain", Tensor<double>({1}, std::vector<double>{1.0}, true), false});
  for (auto& p : params) p.tensor.grad = {0.0};
  OptimConfig cfg;
  cfg.weight_decay = 0.5;
  OptimState<double> st;
  adamw_step(params, st, cfg, 0.1);
  EXPECT_DOUBLE_EQ(params[0].tensor.data[0], 0.95);
  EXPECT_DOUBLE_EQ(params[1].tensor.data[0], 1.0);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  std::vector<NamedParam<double>> params;
  params.push_back({"a", Tensor<double>({2}, true), false});
  params[0].tensor.grad = {3.0, 4.0};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(params[0].tensor.grad[0], 0.6, 1e-12);
  EXPECT_NEAR(params[0].tensor.grad[1], 0.8, 1e-12);
}

TEST(Train, StepCountLrTraceAndEvalCadence) {
  TrainPlan plan;
  plan.task = TaskSpec::make(TaskKind::add, 3);
  plan.n_train = 2;
  plan.N_train = 40;
  plan.seed = 4;
  auto s = quiet_schedule(3);
  s.eval_every = 2;
  s.eval_lengths = {2, 3};
  auto r = train<float>(plan, small_model(), OptimConfig{}, s);
  EXPECT_EQ(r.record.steps, 3 * steps_per_epoch(40, 16));
  ASSERT_EQ(r.record.lr_trace.size(), static_cast<std::size_t>(r.record.steps));
  for (std::size_t i = 1; i < r.record.lr_trace.size(); ++i) {
    EXPECT_LE(r.record.lr_trace[i], r.record.lr_trace[i - 1]);
  }
  // Evaluations at epochs 0, 2 and 3, two lengths each.
  ASSERT_EQ(r.record.metrics.size(), 6u);
  EXPECT_EQ(r.record.metrics[0].epoch, 0);
  EXPECT_EQ(r.record.metrics[2].epoch, 2);
  EXPECT_EQ(r.record.metrics[4].epoch, 3);
  for (const auto& row : r.record.metrics) {
    EXPECT_EQ(row.per_position.size(), 4u);
    for (double p : row.per_position) EXPECT_LE(row.exact_match, p);
  }
  EXPECT_FALSE(r.record.diverged);
}

TEST(Train, DeterministicInDoublePrecision) {
  TrainPlan plan;
  plan.task = TaskSpec::make(TaskKind::add, 3);
  plan.n_train = 2;
  plan.N_train = 30;
  plan.seed = 6;
  auto s = quiet_schedule(2);
  s.eval_lengths = {2, 3};
  auto a = train<double>(plan, small_model(), OptimConfig{}, s);
  auto b = train<double>(plan, small_model(), OptimConfig{}, s);
  EXPECT_EQ(a.model.digest(), b.model.digest());
  ASSERT_EQ(a.record.metrics.size(), b.record.metrics.size());
  for (std::size_t i = 0; i < a.record.metrics.size(); ++i) {
    EXPECT_EQ(a.record.metrics[i].exact_match, b.record.metrics[i].exact_match);
    EXPECT_EQ(a.record.metrics[i].per_position, b.record.metrics[i].per_position);
  }
}

TEST(Train, PrimingHashConstantAcrossEpochs) {
  TrainPlan plan;
  plan.procedure = Procedure::priming;
  plan.task = TaskSpec::make(TaskKind::mul, 6, 2);
  plan.n_train = 3;
  plan.N_train = 200;
  plan.seed = 2;
  plan.priming = PrimingConfig{0.05, {{6, 1.0}}};
  auto s = quiet_schedule(3);
  auto r = train<float>(plan, small_model(), OptimConfig{}, s);
  ASSERT_TRUE(r.record.priming_hash.has_value());
  ASSERT_EQ(r.record.epochs.size(), 3u);
  for (const auto& e : r.record.epochs) EXPECT_EQ(e.fixed_hash, *r.record.priming_hash);
}

TEST(Train, NonFiniteLossIsReported) {
  TrainPlan plan;
  plan.task = TaskSpec::make(TaskKind::add, 3);
  plan.n_train = 2;
  plan.N_train = 30;
  auto mc = small_model();
  mc.n_out = plan.task.n_out();
  auto model = Model<float>::init(mc, 1);
  model.param("classifier.w").tensor.data[0] = std::numeric_limits<float>::quiet_NaN();
  auto data = make_train_set(plan);
  auto r = train_on(std::move(model), data, plan.n_train, OptimConfig{}, quiet_schedule(2), 1);
  EXPECT_TRUE(r.record.diverged);
  EXPECT_NE(r.record.diagnostic.find("non-finite"), std::string::npos);
  EXPECT_EQ(r.record.steps, 0);
}

TEST(Train, RejectsMismatchedOutputWidth) {
  TrainPlan plan;
  plan.task = TaskSpec::make(TaskKind::add, 3);
  plan.n_train = 2;
  plan.N_train = 30;
  auto mc = small_model();
  mc.n_out = 7;
  auto model = Model<float>::init(mc, 1);
  EXPECT_THROW(train_on(std::move(model), make_train_set(plan), 2, OptimConfig{},
                        quiet_schedule(1), 1),
               std::invalid_argument);
}

TEST(Train, OverfitsTinyFixedSet) {
  auto task = TaskSpec::make(TaskKind::add, 2);
  Rng rng(3);
  std::vector<Example> ex;
  for (int i = 0; i < 16; ++i) ex.push_back(sample_example(task, 2, rng));
  auto data = make_fixed_train_set(task, ex);
  ModelConfig mc = small_model();
  mc.d_model = 32;
  mc.depth = 2;
  mc.heads = 4;
  mc.n_out = task.n_out();
  OptimConfig oc;
  oc.lr = 3e-3;
  oc.weight_decay = 0;
  auto s = quiet_schedule(300);
  s.eval_at_start = false;
  s.eval_every = 1000;
  auto r = train_on(Model<float>::init(mc, 5), data, 2, oc, s, 5);
  auto preds = predict_examples(r.model, task, ex);
  EXPECT_EQ(exact_match(preds, target_matrix(ex, task)), 1.0);
}

TEST(FineTune, ZeroExamplesLeaveModelUnchanged) {
  auto task = TaskSpec::make(TaskKind::add, 4);
  ModelConfig mc = small_model();
  mc.n_out = task.n_out();
  auto model = Model<float>::init(mc, 8);
  const auto before = model.digest();
  TrainPlan plan;
  plan.procedure = Procedure::fine_tune;
  plan.task = task;
  plan.n_train = 3;
  plan.fine_tune = FineTuneTarget{4, 0};
  auto s = quiet_schedule(2);
  auto r = fine_tune(std::move(model), task, plan, OptimConfig{}, s);
  EXPECT_EQ(r.model.digest(), before);
  EXPECT_EQ(r.record.steps, 0);
  // Both source and target lengths are evaluated.
  bool saw3 = false, saw4 = false;
  for (const auto& m : r.record.metrics) {
    saw3 |= m.length == 3;
    saw4 |= m.length == 4;
  }
  EXPECT_TRUE(saw3 && saw4);
  EXPECT_EQ(r.record.config.at("finetune.target_length"), "4");
}

TEST(FineTune, RejectsGeometryMismatch) {
  auto source = TaskSpec::make(TaskKind::add, 4);
  ModelConfig mc = small_model();
  mc.n_out = source.n_out();
  TrainPlan plan;
  plan.procedure = Procedure::fine_tune;
  plan.task = TaskSpec::make(TaskKind::add, 5);
  plan.n_train = 3;
  plan.fine_tune = FineTuneTarget{5, 10};
  EXPECT_THROW(fine_tune(Model<float>::init(mc, 1), source, plan, OptimConfig{}, quiet_schedule(1)),
               std::invalid_argument);
}

TEST(Train, WritesLoadableCheckpoint) {
  TrainPlan plan;
  plan.task = TaskSpec::make(TaskKind::mod_add, 3, 3, 97);
  plan.n_train = 2;
  plan.N_train = 20;
  plan.seed = 9;
  auto s = quiet_schedule(1);
  s.checkpoint_dir = std::filesystem::temp_directory_path() / "lengen_trainer_ckpt";
  auto r = train<double>(plan, small_model(), OptimConfig{}, s);
  ASSERT_FALSE(r.record.final_checkpoint.empty());
  auto ck = load_checkpoint<double>(r.record.final_checkpoint);
  EXPECT_EQ(ck.model.digest(), r.model.digest());
  EXPECT_EQ(task_from_metadata(ck.metadata), plan.task);
  std::filesystem::remove_all(s.checkpoint_dir);
}
