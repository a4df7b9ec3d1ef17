#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "lengen/analysis.hpp"

using namespace lengen;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("lengen_analysis_" + name);
}

TokenMatrix matrix(std::size_t cols, std::vector<TokenId> ids) {
  return TokenMatrix{cols, std::move(ids)};
}

// Corrupts roughly a third of the predictions at random positions.
TokenMatrix noisy_predictions(const TokenMatrix& targets, Rng& rng) {
  TokenMatrix p = targets;
  std::uniform_int_distribution<int> coin(0, 2);
  std::uniform_int_distribution<std::size_t> col(0, p.cols - 1);
  std::uniform_int_distribution<TokenId> tok(0, vocab::kSize - 1);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    if (coin(rng) != 0) continue;
    int errors = 1 + coin(rng);
    for (int e = 0; e < errors; ++e) p.ids[r * p.cols + col(rng)] = tok(rng);
  }
  return p;
}

}  // namespace

TEST(Metrics, ExactMatchAndPositions) {
  auto t = matrix(3, {1, 2, 14, 3, 4, 5});
  auto p = matrix(3, {1, 2, 14, 3, 0, 5});
  EXPECT_DOUBLE_EQ(exact_match(p, t), 0.5);
  auto pos = per_position_accuracy(p, t);
  EXPECT_EQ(pos, (std::vector<double>{1.0, 0.5, 1.0}));
  EXPECT_THROW(exact_match(matrix(2, {1, 2}), t), std::invalid_argument);
}

TEST(Metrics, PaddingCountsTowardExactMatch) {
  auto task = TaskSpec::make(TaskKind::add, 2);
  auto t = matrix(3, {5, 1, vocab::kPad});
  auto p = matrix(3, {5, 1, 0});
  auto row = score_predictions(p, t, task);
  EXPECT_DOUBLE_EQ(row.exact_match, 0.0);
  EXPECT_DOUBLE_EQ(row.malformed_rate, 0.0);  // "510" still decodes
  auto bad = matrix(3, {vocab::kPad, 1, 0});
  EXPECT_DOUBLE_EQ(score_predictions(bad, t, task).malformed_rate, 1.0);
}

TEST(Metrics, ExactMatchBoundedByEveryPosition) {
  Rng rng(4);
  auto task = TaskSpec::make(TaskKind::add, 5);
  std::vector<Example> ex;
  for (int i = 0; i < 500; ++i) ex.push_back(sample_example(task, 5, rng));
  auto t = target_matrix(ex, task);
  auto row = score_predictions(noisy_predictions(t, rng), t, task);
  for (double p : row.per_position) EXPECT_LE(row.exact_match, p);
  EXPECT_EQ(row.sample_count, 500u);
}

TEST(FailureReport, CarryBucketsMatchBruteForce) {
  Rng rng(7);
  auto task = TaskSpec::make(TaskKind::add, 6);
  std::vector<Example> ex;
  for (int i = 0; i < 3000; ++i) ex.push_back(sample_example(task, 6, rng));
  auto t = target_matrix(ex, task);
  auto preds = noisy_predictions(t, rng);
  auto rep = failure_report(ex, preds, task);

  std::map<int, std::size_t> nc_count, mc_count;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < ex.size(); ++i) {
    std::uint64_t a = ex[i].x1.to_u64(), b = ex[i].x2.to_u64();
    int carry = 0, nc = 0, run = 0, mc = 0;
    while (a || b) {
      carry = (a % 10 + b % 10 + carry) >= 10;
      nc += carry;
      run = carry ? run + 1 : 0;
      mc = std::max(mc, run);
      a /= 10;
      b /= 10;
    }
    ++nc_count[nc];
    ++mc_count[mc];
    auto pr = preds.row(i), tr = t.row(i);
    wrong += !std::equal(pr.begin(), pr.end(), tr.begin());
  }
  ASSERT_EQ(rep.by_nc.size(), nc_count.size());
  for (auto [k, c] : nc_count) EXPECT_EQ(rep.by_nc.at(k).count, c);
  for (auto [k, c] : mc_count) EXPECT_EQ(rep.by_mc.at(k).count, c);
  EXPECT_EQ(rep.wrong, wrong);

  double total = 0;
  for (auto [k, f] : rep.wrong_digit_count_hist) {
    EXPECT_GE(k, 1);
    total += f;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  total = 0;
  for (auto [k, f] : rep.single_error_position_hist) {
    EXPECT_GE(k, 1);
    EXPECT_LE(k, task.n_out());
    total += f;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(FailureReport, MultiplicationHasNoCarryBuckets) {
  Rng rng(1);
  auto task = TaskSpec::make(TaskKind::mul, 4, 2);
  std::vector<Example> ex;
  for (int i = 0; i < 20; ++i) ex.push_back(sample_example(task, 4, rng));
  auto t = target_matrix(ex, task);
  EXPECT_THROW(failure_report(ex, t, task), std::invalid_argument);
  auto rep = failure_report(ex, t, task, CarryBuckets::skip);
  EXPECT_FALSE(rep.has_carry_buckets);
  EXPECT_TRUE(rep.by_nc.empty());
  EXPECT_EQ(rep.wrong, 0u);
}

TEST(Csv, MetricsRoundTripFullPrecision) {
  std::vector<MetricRow> rows(3);
  rows[0] = {0, 0, 5, 0.1 + 0.2, 1.0 / 3.0, {0.123456789012345678, 1e-17, 1}, 10000};
  rows[1] = {1570, 10, 6, 0.99990000000000001, 0, {1, 1, 0.5}, 10000};
  rows[2] = {3140, 20, 7, 2.0 / 7.0, 0.25, {1, 2.0 / 3.0}, 5};
  auto path = temp_path("metrics.csv");
  write_metrics_csv(path, "run-a", rows);
  auto t = read_metrics_csv(path);
  ASSERT_EQ(t.rows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(t.run_ids[i], "run-a");
    EXPECT_EQ(t.rows[i].step, rows[i].step);
    EXPECT_EQ(t.rows[i].length, rows[i].length);
    EXPECT_EQ(t.rows[i].exact_match, rows[i].exact_match);
    EXPECT_EQ(t.rows[i].malformed_rate, rows[i].malformed_rate);
    EXPECT_EQ(t.rows[i].per_position, rows[i].per_position);
    EXPECT_EQ(t.rows[i].sample_count, rows[i].sample_count);
  }
  std::filesystem::remove(path);
}

TEST(Csv, FailureRoundTrip) {
  FailureReport rep;
  rep.has_carry_buckets = true;
  rep.by_nc[0] = {10, 9};
  rep.by_nc[2] = {3, 1};
  rep.by_mc[1] = {7, 7};
  rep.wrong = 3;
  rep.single_errors = 2;
  rep.wrong_digit_count_hist = {{1, 2.0 / 3.0}, {2, 1.0 / 3.0}};
  rep.single_error_position_hist = {{4, 1.0}};
  auto path = temp_path("failure.csv");
  write_failure_csv(path, "r1", rep);
  auto rows = read_failure_csv(path);
  auto expect = failure_rows("r1", rep);
  ASSERT_EQ(rows.size(), expect.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].bucket_kind, expect[i].bucket_kind);
    EXPECT_EQ(rows[i].bucket_value, expect[i].bucket_value);
    EXPECT_EQ(rows[i].count, expect[i].count);
    EXPECT_EQ(rows[i].accuracy_or_freq, expect[i].accuracy_or_freq);
  }
  EXPECT_EQ(rows[0].accuracy_or_freq, 0.9);
  std::filesystem::remove(path);
}

TEST(Csv, RejectsForeignFiles) {
  auto path = temp_path("foreign.csv");
  {
    std::ofstream out(path);
    out << "a,b,c\n1,2,3\n";
  }
  EXPECT_THROW(read_metrics_csv(path), std::runtime_error);
  EXPECT_THROW(read_failure_csv(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(FailureReport, BucketsPartitionTheTestSet) {
  Rng rng(11);
  auto task = TaskSpec::make(TaskKind::add, 8);
  auto set = make_eval_set(task, 8, 2000, rng, 5);
  auto t = target_matrix(set.examples, task);
  auto preds = noisy_predictions(t, rng);
  auto rep = failure_report(set.examples, preds, task);
  std::size_t nc = 0, mc = 0, wrong_nc = 0;
  for (auto [k, b] : rep.by_nc) {
    nc += b.count;
    wrong_nc += b.count - b.correct;
  }
  for (auto [k, b] : rep.by_mc) mc += b.count;
  EXPECT_EQ(nc, set.examples.size());
  EXPECT_EQ(mc, set.examples.size());
  EXPECT_EQ(rep.total, set.examples.size());
  EXPECT_EQ(wrong_nc, rep.wrong);
}

TEST(FailureReport, BucketAccuracyEqualsScoringTheFilteredSubset) {
  Rng rng(12);
  auto task = TaskSpec::make(TaskKind::add, 6);
  std::vector<Example> ex;
  for (int i = 0; i < 1500; ++i) ex.push_back(sample_example(task, 6, rng));
  auto t = target_matrix(ex, task);
  auto preds = noisy_predictions(t, rng);
  auto rep = failure_report(ex, preds, task);
  for (auto [nc, bucket] : rep.by_nc) {
    TokenMatrix p{preds.cols, {}}, q{t.cols, {}};
    for (std::size_t i = 0; i < ex.size(); ++i) {
      if (carry_profile(ex[i].x1, ex[i].x2).nc != nc) continue;
      auto pr = preds.row(i), tr = t.row(i);
      p.ids.insert(p.ids.end(), pr.begin(), pr.end());
      q.ids.insert(q.ids.end(), tr.begin(), tr.end());
    }
    EXPECT_EQ(p.rows(), bucket.count);
    EXPECT_DOUBLE_EQ(exact_match(p, q), bucket.accuracy());
  }
}
