#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lengen/model.hpp"
#include "lengen/task.hpp"

namespace lengen {

/// Row-major [rows, cols] matrix of token ids.
struct TokenMatrix {
  std::size_t cols = 0;
  std::vector<TokenId> ids;

  std::size_t rows() const { return cols ? ids.size() / cols : 0; }
  std::span<const TokenId> row(std::size_t r) const {
    return std::span<const TokenId>(ids).subspan(r * cols, cols);
  }
};

/// Encoded targets of a set of examples, [N, n_out].
TokenMatrix target_matrix(std::span<const Example> examples, const TaskSpec& task);

/// One evaluation measurement at a given step and operand length.
struct MetricRow {
  long step = 0;
  double epoch = 0;
  int length = 0;
  double exact_match = 0;
  double malformed_rate = 0;
  std::vector<double> per_position;  // index 0 is the leftmost output digit
  std::size_t sample_count = 0;
};

/// Fraction of rows matching on every position, padding included.
double exact_match(const TokenMatrix& preds, const TokenMatrix& targets);
std::vector<double> per_position_accuracy(const TokenMatrix& preds,
                                          const TokenMatrix& targets);
/// Exact match, per-position accuracy and malformed-decode rate.
MetricRow score_predictions(const TokenMatrix& preds, const TokenMatrix& targets,
                            const TaskSpec& task);

template <typename T>
TokenMatrix predict_examples(const Model<T>& model, const TaskSpec& task,
                             std::span<const Example> examples,
                             std::size_t batch = 512);

/// One MetricRow per requested length, each on a fresh evaluation set.
template <typename T>
std::vector<MetricRow> length_profile(const Model<T>& model, const TaskSpec& task,
                                      std::span<const int> lengths, int N_test,
                                      Rng& rng, int n_train);

struct BucketStat {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy() const { return count ? static_cast<double>(correct) / count : 0.0; }
};

struct FailureReport {
  bool has_carry_buckets = false;
  std::map<int, BucketStat> by_nc;  // total carries
  std::map<int, BucketStat> by_mc;  // longest consecutive carry run
  /// #incorrect positions -> frequency among wrong predictions.
  std::map<int, double> wrong_digit_count_hist;
  /// 1-based position -> frequency among predictions with exactly one error.
  std::map<int, double> single_error_position_hist;
  std::size_t total = 0;
  std::size_t wrong = 0;
  std::size_t single_errors = 0;
};

enum class CarryBuckets { include, skip };

/// Throws std::invalid_argument when carry buckets are requested for a
/// multiplication-family task.
FailureReport failure_report(std::span<const Example> examples, const TokenMatrix& preds,
                             const TaskSpec& task,
                             CarryBuckets carries = CarryBuckets::include);

// ---------------------------------------------------------------------------
// CSV

struct MetricsTable {
  std::vector<std::string> run_ids;  // parallel to rows
  std::vector<MetricRow> rows;
};

/// Columns: run_id, step, epoch, length, exact_match, malformed_rate,
/// pos_1..pos_n, sample_count. n is the longest per_position vector.
void write_metrics_csv(const std::filesystem::path& path, const std::string& run_id,
                       std::span<const MetricRow> rows);
void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table);
MetricsTable read_metrics_csv(const std::filesystem::path& path);

struct FailureRow {
  std::string run_id;
  std::string bucket_kind;  // nc | mc | err_count | err_pos
  int bucket_value = 0;
  std::size_t count = 0;
  double accuracy_or_freq = 0;
};

std::vector<FailureRow> failure_rows(const std::string& run_id, const FailureReport& report);
void write_failure_csv(const std::filesystem::path& path, const std::string& run_id,
                       const FailureReport& report);
std::vector<FailureRow> read_failure_csv(const std::filesystem::path& path);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace lengen
