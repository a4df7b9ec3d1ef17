#include "lengen/task.hpp"

#include <algorithm>
#include <numeric>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lengen {

Rng derive_rng(std::uint64_t master, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(master),
                    static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32), 0x6c656e67u};
  return Rng(seq);
}

namespace vocab {

namespace {
constexpr std::string_view kNames[kSize] = {
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "+", "%", "\xc3\x97", "*", "<PAD>"};
}

std::string_view name(TokenId id) {
  if (id < 0 || id >= kSize) throw std::out_of_range("vocab: bad token id");
  return kNames[id];
}

std::string render(std::span<const TokenId> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out.append(name(ids[i]));
  }
  return out;
}

std::vector<TokenId> parse(std::string_view text) {
  std::vector<TokenId> ids;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    auto it = std::find(std::begin(kNames), std::end(kNames), tok);
    if (it == std::end(kNames)) {
      if (tok == "x") {
        ids.push_back(kTimes);
        continue;
      }
      throw std::invalid_argument("vocab: unknown token '" + tok + "'");
    }
    ids.push_back(static_cast<TokenId>(it - std::begin(kNames)));
  }
  return ids;
}

}  // namespace vocab

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::add: return "add";
    case TaskKind::mod_add: return "mod_add";
    case TaskKind::mul: return "mul";
    case TaskKind::mod_mul: return "mod_mul";
    case TaskKind::elementwise_add: return "elementwise_add";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view text) {
  for (auto k : {TaskKind::add, TaskKind::mod_add, TaskKind::mul,
                 TaskKind::mod_mul, TaskKind::elementwise_add}) {
    if (to_string(k) == text) return k;
  }
  throw std::invalid_argument("unknown task kind '" + std::string(text) + "'");
}

TaskSpec TaskSpec::make(TaskKind kind, int n_test, int n2_max,
                        std::uint64_t modulus) {
  TaskSpec t{kind, n_test, n2_max, modulus};
  if (n_test < 1) throw std::invalid_argument("TaskSpec: n_test must be >= 1");
  if (!t.add_family() && n2_max < 1) {
    throw std::invalid_argument("TaskSpec: n2_max must be >= 1");
  }
  if (t.modular() && modulus <= 1) {
    throw std::invalid_argument("TaskSpec: modular tasks need modulus > 1");
  }
  if (!t.modular()) t.modulus = 0;
  return t;
}

int TaskSpec::n_out() const {
  switch (kind) {
    case TaskKind::add:
    case TaskKind::elementwise_add: return n_test + 1;
    case TaskKind::mul: return n_test + n2_max;
    case TaskKind::mod_add:
    case TaskKind::mod_mul: return decimal_width(modulus - 1);
  }
  return 0;
}

TokenId TaskSpec::op_token() const {
  switch (kind) {
    case TaskKind::add:
    case TaskKind::elementwise_add: return vocab::kPlus;
    case TaskKind::mod_add: return vocab::kMod;
    case TaskKind::mul: return vocab::kTimes;
    case TaskKind::mod_mul: return vocab::kStar;
  }
  return vocab::kPad;
}

DigitString TaskSpec::apply(const DigitString& x1, const DigitString& x2) const {
  switch (kind) {
    case TaskKind::add: return ds_add(x1, x2);
    case TaskKind::mod_add: return ds_mod(ds_add(x1, x2), modulus);
    case TaskKind::mul: return ds_mul(x1, x2);
    case TaskKind::mod_mul: return ds_mod(ds_mul(x1, x2), modulus);
    case TaskKind::elementwise_add: return ds_elementwise_add(x1, x2);
  }
  throw std::logic_error("TaskSpec::apply: bad kind");
}

DigitString sample_below_pow10(int n, Rng& rng) {
  std::uniform_int_distribution<int> digit(0, 9);
  std::vector<std::uint8_t> d(static_cast<std::size_t>(n));
  for (;;) {
    bool nonzero = false;
    for (auto& x : d) {
      x = static_cast<std::uint8_t>(digit(rng));
      nonzero |= x != 0;
    }
    if (nonzero) return DigitString::from_digits(d);
  }
}

DigitString sample_exact_length(int n, Rng& rng) {
  std::uniform_int_distribution<int> lead(1, 9);
  std::uniform_int_distribution<int> digit(0, 9);
  std::vector<std::uint8_t> d(static_cast<std::size_t>(n));
  d[0] = static_cast<std::uint8_t>(lead(rng));
  for (std::size_t i = 1; i < d.size(); ++i) {
    d[i] = static_cast<std::uint8_t>(digit(rng));
  }
  return DigitString::from_digits(d);
}

bool OperandPool::contains(const DigitString& x) const {
  return index_.contains(x.str());
}

OperandPool build_operand_pool(std::uint64_t seed, int n_train_count,
                               int n_train) {
  if (n_train < 1) throw std::invalid_argument("operand pool: n_train < 1");
  if (n_train_count < 0) throw std::invalid_argument("operand pool: N_train < 0");
  // N_train must be a strict subset of [0, 10^n_train), i.e. N_train < 10^n.
  if (n_train <= 18) {
    std::uint64_t domain = 1;
    for (int i = 0; i < n_train; ++i) domain *= 10;
    if (static_cast<std::uint64_t>(n_train_count) >= domain) {
      throw std::invalid_argument(
          "operand pool: N_train must be < 10^n_train");
    }
  }
  OperandPool pool;
  pool.n_train = n_train;
  pool.seed = seed;
  pool.values.reserve(static_cast<std::size_t>(n_train_count));
  Rng rng = derive_rng(seed, 0x706f6f6c);
  while (static_cast<int>(pool.values.size()) < n_train_count) {
    auto x = sample_below_pow10(n_train, rng);
    if (pool.index_.insert(x.str()).second) pool.values.push_back(std::move(x));
  }
  return pool;
}

Example sample_example(const TaskSpec& task, const X1Source& x1_source,
                       Rng& rng) {
  Example ex;
  int width2 = task.n2_max;
  if (const auto* pool = std::get_if<const OperandPool*>(&x1_source)) {
    if (*pool == nullptr || (*pool)->values.empty()) {
      throw std::invalid_argument("sample_example: empty operand pool");
    }
    std::uniform_int_distribution<std::size_t> pick(0, (*pool)->values.size() - 1);
    ex.x1 = (*pool)->values[pick(rng)];
    if (task.add_family()) width2 = (*pool)->n_train;
  } else {
    int n = std::get<int>(x1_source);
    if (n < 1) throw std::invalid_argument("sample_example: length < 1");
    ex.x1 = sample_exact_length(n, rng);
    if (task.add_family()) width2 = n;
  }
  ex.x2 = sample_below_pow10(width2, rng);
  ex.y = task.apply(ex.x1, ex.x2);
  return ex;
}

namespace {

void put_field(std::vector<TokenId>& out, const DigitString& v, int width,
               const char* what) {
  if (static_cast<int>(v.size()) > width) {
    throw std::invalid_argument(std::string("encode_example: ") + what +
                                " has " + std::to_string(v.size()) +
                                " digits, field width is " +
                                std::to_string(width));
  }
  for (auto d : v.digits()) out.push_back(d);
  for (int i = static_cast<int>(v.size()); i < width; ++i) {
    out.push_back(vocab::kPad);
  }
}

}  // namespace

EncodedExample encode_example(const Example& ex, const TaskSpec& task) {
  EncodedExample enc;
  enc.input.reserve(static_cast<std::size_t>(task.input_length()));
  put_field(enc.input, ex.x1, task.n_test, "x1");
  enc.input.push_back(task.op_token());
  put_field(enc.input, ex.x2, task.width2(), "x2");
  enc.target.reserve(static_cast<std::size_t>(task.n_out()));
  put_field(enc.target, ex.y, task.n_out(), "y");
  return enc;
}

namespace {

std::optional<DigitString> decode_field(std::span<const TokenId> ids) {
  std::vector<std::uint8_t> digits;
  std::size_t i = 0;
  for (; i < ids.size() && ids[i] >= 0 && ids[i] <= 9; ++i) {
    digits.push_back(static_cast<std::uint8_t>(ids[i]));
  }
  for (std::size_t j = i; j < ids.size(); ++j) {
    if (ids[j] != vocab::kPad) return std::nullopt;
  }
  if (digits.empty()) return std::nullopt;
  return DigitString::from_digits(digits);
}

}  // namespace

std::optional<DigitString> decode_output(std::span<const TokenId> ids,
                                         const TaskSpec& task) {
  if (static_cast<int>(ids.size()) != task.n_out()) {
    throw std::invalid_argument("decode_output: expected " +
                                std::to_string(task.n_out()) + " tokens");
  }
  return decode_field(ids);
}

std::optional<Example> decode_example(const EncodedExample& enc,
                                      const TaskSpec& task) {
  if (static_cast<int>(enc.input.size()) != task.input_length()) return std::nullopt;
  std::span<const TokenId> in(enc.input);
  if (in[static_cast<std::size_t>(task.n_test)] != task.op_token()) return std::nullopt;
  auto x1 = decode_field(in.first(static_cast<std::size_t>(task.n_test)));
  auto x2 = decode_field(in.subspan(static_cast<std::size_t>(task.n_test) + 1));
  auto y = decode_output(enc.target, task);
  if (!x1 || !x2 || !y) return std::nullopt;
  return Example{*x1, *x2, *y};
}

// ---------------------------------------------------------------------------

std::string_view to_string(Procedure p) {
  switch (p) {
    case Procedure::standard: return "standard";
    case Procedure::fine_tune: return "fine_tune";
    case Procedure::priming: return "priming";
  }
  return "?";
}

Procedure parse_procedure(std::string_view text) {
  for (auto p : {Procedure::standard, Procedure::fine_tune, Procedure::priming}) {
    if (to_string(p) == text) return p;
  }
  throw std::invalid_argument("unknown procedure '" + std::string(text) + "'");
}

namespace {

LengthWeights normalized(LengthWeights w) {
  double total = 0;
  for (auto it = w.begin(); it != w.end();) {
    if (it->second < 0) throw std::invalid_argument("priming weights: negative weight");
    if (it->second == 0) {
      it = w.erase(it);
    } else {
      total += it->second;
      ++it;
    }
  }
  if (w.empty()) throw std::invalid_argument("priming weights: empty support");
  for (auto& [n, v] : w) {
    if (n < 1) throw std::invalid_argument("priming weights: length < 1");
    v /= total;
  }
  return w;
}

}  // namespace

LengthWeights priming_weights(PrimingShape shape, int n_min, int n_max) {
  if (n_min > n_max) throw std::invalid_argument("priming weights: n_min > n_max");
  LengthWeights w;
  switch (shape) {
    case PrimingShape::single: w[n_max] = 1; break;
    case PrimingShape::pair:
      w[n_max - 1] = 1;
      w[n_max] = 1;
      break;
    case PrimingShape::uniform:
      for (int n = n_min; n <= n_max; ++n) w[n] = 1;
      break;
    case PrimingShape::even_only:
      for (int n = n_min; n <= n_max; ++n) {
        if (n % 2 == 0) w[n] = 1;
      }
      break;
  }
  return normalized(std::move(w));
}

LengthWeights load_priming_histogram(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open priming histogram " + path.string());
  LengthWeights w;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    int n = 0;
    double count = 0;
    if (!(ls >> n)) continue;
    if (!(ls >> count)) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) +
                                  ": expected 'length count'");
    }
    w[n] += count;
  }
  return normalized(std::move(w));
}

LengthWeights parse_priming_weights(std::string_view text) {
  auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw std::invalid_argument("priming weights: expected shape:args, got '" +
                                std::string(text) + "'");
  }
  auto shape = text.substr(0, colon);
  std::string args(text.substr(colon + 1));
  if (shape == "file") return load_priming_histogram(args);
  auto parse_range = [&](int& lo, int& hi) {
    auto dash = args.find('-');
    if (dash == std::string::npos) {
      lo = hi = std::stoi(args);
    } else {
      lo = std::stoi(args.substr(0, dash));
      hi = std::stoi(args.substr(dash + 1));
    }
  };
  int lo = 0;
  int hi = 0;
  parse_range(lo, hi);
  if (shape == "single") return priming_weights(PrimingShape::single, hi, hi);
  if (shape == "pair") return priming_weights(PrimingShape::pair, hi - 1, hi);
  if (shape == "uniform") return priming_weights(PrimingShape::uniform, lo, hi);
  if (shape == "even") return priming_weights(PrimingShape::even_only, lo, hi);
  throw std::invalid_argument("priming weights: unknown shape '" +
                              std::string(shape) + "'");
}

int priming_count(double rate, int N_train) {
  if (rate == 0.0) return 0;
  return std::max(1, static_cast<int>(std::lround(rate * N_train)));
}

void TrainPlan::validate() const {
  if (n_train < 1) throw std::invalid_argument("plan: n_train must be >= 1");
  if (n_train > task.n_test) {
    throw std::invalid_argument("plan: n_train exceeds the task's n_test width");
  }
  if ((procedure == Procedure::priming) != priming.has_value()) {
    throw std::invalid_argument("plan: priming settings present iff procedure = priming");
  }
  if ((procedure == Procedure::fine_tune) != fine_tune.has_value()) {
    throw std::invalid_argument("plan: fine-tune target present iff procedure = fine_tune");
  }
  if (priming) {
    if (!(priming->rate >= 0.0 && priming->rate < 1.0)) {
      throw std::invalid_argument("plan: priming rate must be in [0, 1)");
    }
    if (priming->rate > 0.0 && priming->rate * N_train < 1.0) {
      throw std::invalid_argument("plan: priming rate * N_train < 1");
    }
    if (priming->rate > 0.0 && priming->weights.empty()) {
      throw std::invalid_argument("plan: priming weights have empty support");
    }
    for (auto [n, w] : priming->weights) {
      if (w > 0 && n > task.n_test) {
        throw std::invalid_argument("plan: priming length " + std::to_string(n) +
                                    " exceeds n_test");
      }
    }
  }
  if (fine_tune) {
    if (fine_tune->n_target < 1 || fine_tune->n_target > task.n_test) {
      throw std::invalid_argument("plan: fine-tune n_target outside [1, n_test]");
    }
    if (fine_tune->N_fine < 0) throw std::invalid_argument("plan: N_fine < 0");
  }
}

std::vector<Example> TrainSet::epoch(Rng& rng, std::vector<std::uint8_t>* fixed_mask) const {
  std::vector<Example> items;
  items.reserve(epoch_size());
  int width2 = task_.add_family() ? pool_.n_train : task_.n2_max;
  for (const auto& x1 : pool_.values) {
    Example ex{x1, sample_below_pow10(width2, rng), {}};
    ex.y = task_.apply(ex.x1, ex.x2);
    items.push_back(std::move(ex));
  }
  items.insert(items.end(), fixed_.begin(), fixed_.end());
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Example> out;
  out.reserve(items.size());
  if (fixed_mask) fixed_mask->assign(items.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.push_back(std::move(items[order[i]]));
    if (fixed_mask) (*fixed_mask)[i] = order[i] >= pool_.values.size();
  }
  return out;
}

TrainSet make_train_set(const TrainPlan& plan) {
  plan.validate();
  TrainSet set;
  set.procedure_ = plan.procedure;
  set.task_ = plan.task;
  switch (plan.procedure) {
    case Procedure::standard:
      set.pool_ = build_operand_pool(plan.seed, plan.N_train, plan.n_train);
      break;
    case Procedure::priming: {
      const int n_prime = priming_count(plan.priming->rate, plan.N_train);
      set.pool_ = build_operand_pool(plan.seed, plan.N_train - n_prime, plan.n_train);
      PrimingSpec spec{plan.priming->rate, plan.priming->weights, {}};
      Rng rng = derive_rng(plan.seed, 0x7072696d);
      std::vector<int> lengths;
      std::vector<double> weights;
      for (auto [n, w] : spec.weights) {
        lengths.push_back(n);
        weights.push_back(w);
      }
      std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
      for (int i = 0; i < n_prime; ++i) {
        spec.fixed_examples.push_back(sample_example(plan.task, lengths[pick(rng)], rng));
      }
      set.fixed_ = spec.fixed_examples;
      set.priming_ = std::move(spec);
      break;
    }
    case Procedure::fine_tune: {
      set.pool_.n_train = plan.n_train;
      Rng rng = derive_rng(plan.seed, 0x66696e65);
      for (int i = 0; i < plan.fine_tune->N_fine; ++i) {
        set.fixed_.push_back(sample_example(plan.task, plan.fine_tune->n_target, rng));
      }
      break;
    }
  }
  return set;
}

TrainSet make_fixed_train_set(const TaskSpec& task, std::vector<Example> examples) {
  TrainSet set;
  set.procedure_ = Procedure::standard;
  set.task_ = task;
  for (const auto& ex : examples) encode_example(ex, task);
  set.fixed_ = std::move(examples);
  return set;
}

EvalSet make_eval_set(const TaskSpec& task, int n, int N_test, Rng& rng,
                      int n_train) {
  if (n < 1) throw std::invalid_argument("make_eval_set: n must be >= 1");
  EvalSet set;
  set.length = n;
  set.in_distribution = n == n_train;
  set.examples.reserve(static_cast<std::size_t>(std::max(N_test, 0)));
  for (int i = 0; i < N_test; ++i) set.examples.push_back(sample_example(task, n, rng));
  return set;
}

std::uint64_t multiset_hash(std::span<const Example> examples) {
  std::uint64_t total = 0;
  for (const auto& ex : examples) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const std::string& s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
      h ^= 0xff;
      h *= 0x100000001b3ULL;
    };
    mix(ex.x1.str());
    mix(ex.x2.str());
    mix(ex.y.str());
    // splitmix finalizer so that summing stays well-distributed
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ULL;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebULL;
    h ^= h >> 31;
    total += h;
  }
  return total;
}

void write_examples_tsv(const std::filesystem::path& path,
                        std::span<const Example> examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) {
    out << ex.x1.str() << '\t' << ex.x2.str() << '\t' << ex.y.str() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Example> read_examples_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Example> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, '\t') || !std::getline(ls, b, '\t') ||
        !std::getline(ls, c, '\t')) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected x1<TAB>x2<TAB>y");
    }
    out.push_back({DigitString(a), DigitString(b), DigitString(c)});
  }
  return out;
}

}  // namespace lengen
