#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <variant>
#include <vector>

#include "lengen/digits.hpp"

namespace lengen {

using Rng = std::mt19937_64;
using TokenId = std::int32_t;

/// Independent stream `stream` of the generator family rooted at `master`.
Rng derive_rng(std::uint64_t master, std::uint64_t stream);

namespace vocab {
inline constexpr int kSize = 15;
inline constexpr TokenId kPlus = 10;
inline constexpr TokenId kMod = 11;    // '%', modular addition
inline constexpr TokenId kTimes = 12;  // '×', multiplication
inline constexpr TokenId kStar = 13;   // '*', modular multiplication
inline constexpr TokenId kPad = 14;

std::string_view name(TokenId id);
/// Space-separated token names, e.g. "1 2 <PAD> + 3 9 <PAD>".
std::string render(std::span<const TokenId> ids);
std::vector<TokenId> parse(std::string_view text);
}  // namespace vocab

enum class TaskKind { add, mod_add, mul, mod_mul, elementwise_add };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

/// Encoding geometry of one task.
///
/// `n_test` is the first-operand field width. The second operand field is
/// `n_test` wide for the addition family and `n2_max` wide for the
/// multiplication family.
struct TaskSpec {
  TaskKind kind = TaskKind::add;
  int n_test = 5;
  int n2_max = 3;
  std::uint64_t modulus = 0;

  static TaskSpec make(TaskKind kind, int n_test, int n2_max = 3,
                       std::uint64_t modulus = 0);

  bool add_family() const {
    return kind == TaskKind::add || kind == TaskKind::mod_add ||
           kind == TaskKind::elementwise_add;
  }
  bool modular() const {
    return kind == TaskKind::mod_add || kind == TaskKind::mod_mul;
  }
  int width2() const { return add_family() ? n_test : n2_max; }
  int n_out() const;
  int input_length() const { return n_test + 1 + width2(); }
  TokenId op_token() const;

  /// Ground-truth result for (x1, x2).
  DigitString apply(const DigitString& x1, const DigitString& x2) const;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct Example {
  DigitString x1;
  DigitString x2;
  DigitString y;
  friend bool operator==(const Example&, const Example&) = default;
};

struct EncodedExample {
  std::vector<TokenId> input;
  std::vector<TokenId> target;
};

/// Uniform over [1, 10^n).
DigitString sample_below_pow10(int n, Rng& rng);
/// Uniform over numbers with exactly n digits ([1, 10) when n = 1).
DigitString sample_exact_length(int n, Rng& rng);

struct OperandPool {
  std::vector<DigitString> values;
  int n_train = 0;
  std::uint64_t seed = 0;

  bool contains(const DigitString& x) const;

 private:
  friend OperandPool build_operand_pool(std::uint64_t, int, int);
  std::unordered_set<std::string> index_;
};

/// N_train distinct values drawn uniformly from [1, 10^n_train).
OperandPool build_operand_pool(std::uint64_t seed, int n_train_count,
                               int n_train);

/// Where the first operand comes from: a training pool, or an exact digit
/// length for evaluation and priming.
using X1Source = std::variant<const OperandPool*, int>;

/// Samples one labeled example. Second operands are drawn fresh: from
/// [1, 10^n2_max) for the multiplication family, and for the addition
/// family from [1, 10^w) with w the pool's n_train or the requested length.
Example sample_example(const TaskSpec& task, const X1Source& x1_source,
                       Rng& rng);

/// Throws std::invalid_argument when an operand or the result exceeds its
/// field width.
EncodedExample encode_example(const Example& ex, const TaskSpec& task);

/// std::nullopt stands for a malformed output sequence.
std::optional<DigitString> decode_output(std::span<const TokenId> ids,
                                         const TaskSpec& task);

/// Inverse of encode_example on well-formed sequences.
std::optional<Example> decode_example(const EncodedExample& enc,
                                      const TaskSpec& task);

// ---------------------------------------------------------------------------
// Training sets

enum class Procedure { standard, fine_tune, priming };
std::string_view to_string(Procedure p);
Procedure parse_procedure(std::string_view text);

/// Priming length distribution: digit length -> weight (normalized).
using LengthWeights = std::map<int, double>;

enum class PrimingShape { single, pair, uniform, even_only };

/// single: all mass at n_max. pair: equal mass at n_max-1 and n_max.
/// uniform / even_only: equal mass over [n_min, n_max] (even lengths only).
LengthWeights priming_weights(PrimingShape shape, int n_min, int n_max);
/// Histogram file: one "length count" pair per line, '#' comments allowed.
LengthWeights load_priming_histogram(const std::filesystem::path& path);
/// "single:35", "pair:35", "uniform:6-35", "even:6-10", "file:<path>".
LengthWeights parse_priming_weights(std::string_view text);

struct PrimingConfig {
  double rate = 0.0;
  LengthWeights weights;
};

struct FineTuneTarget {
  int n_target = 0;
  int N_fine = 0;
};

struct TrainPlan {
  Procedure procedure = Procedure::standard;
  TaskSpec task;
  int n_train = 5;
  int N_train = 5000;
  std::optional<PrimingConfig> priming;
  std::optional<FineTuneTarget> fine_tune;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on an inconsistent plan.
  void validate() const;
};

/// Number of fixed priming examples: round(rate * N_train), zero for a
/// zero rate.
int priming_count(double rate, int N_train);

struct PrimingSpec {
  double rate = 0.0;
  LengthWeights weights;
  std::vector<Example> fixed_examples;
};

/// A materialized training set. The pool portion is re-labeled with fresh
/// second operands every epoch; `fixed` examples never change.
class TrainSet {
 public:
  Procedure procedure() const { return procedure_; }
  const TaskSpec& task() const { return task_; }
  const OperandPool& pool() const { return pool_; }
  std::span<const Example> fixed() const { return fixed_; }
  const std::optional<PrimingSpec>& priming() const { return priming_; }
  std::size_t epoch_size() const { return pool_.values.size() + fixed_.size(); }

  /// One epoch: every pool member once with a fresh x2, plus every fixed
  /// example, uniformly shuffled together. `fixed_mask`, when given,
  /// marks which returned examples are fixed ones.
  std::vector<Example> epoch(Rng& rng,
                             std::vector<std::uint8_t>* fixed_mask = nullptr) const;

 private:
  friend TrainSet make_train_set(const TrainPlan& plan);
  friend TrainSet make_fixed_train_set(const TaskSpec&, std::vector<Example>);
  Procedure procedure_ = Procedure::standard;
  TaskSpec task_;
  OperandPool pool_;
  std::vector<Example> fixed_;
  std::optional<PrimingSpec> priming_;
};

TrainSet make_train_set(const TrainPlan& plan);
/// A training set consisting only of the given frozen examples.
TrainSet make_fixed_train_set(const TaskSpec& task,
                              std::vector<Example> examples);

struct EvalSet {
  int length = 0;
  bool in_distribution = false;
  std::vector<Example> examples;
};

EvalSet make_eval_set(const TaskSpec& task, int n, int N_test, Rng& rng,
                      int n_train);

/// Order-independent 64-bit hash of a collection of examples.
std::uint64_t multiset_hash(std::span<const Example> examples);

void write_examples_tsv(const std::filesystem::path& path,
                        std::span<const Example> examples);
std::vector<Example> read_examples_tsv(const std::filesystem::path& path);

}  // namespace lengen
