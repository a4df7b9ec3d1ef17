#include "lengen/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lengen {

TokenMatrix target_matrix(std::span<const Example> examples, const TaskSpec& task) {
  TokenMatrix m;
  m.cols = static_cast<std::size_t>(task.n_out());
  m.ids.reserve(examples.size() * m.cols);
  for (const auto& ex : examples) {
    auto enc = encode_example(ex, task);
    m.ids.insert(m.ids.end(), enc.target.begin(), enc.target.end());
  }
  return m;
}

namespace {

void check_same_shape(const TokenMatrix& a, const TokenMatrix& b) {
  if (a.cols != b.cols || a.ids.size() != b.ids.size()) {
    throw std::invalid_argument("prediction and target matrices differ in shape");
  }
}

}  // namespace

double exact_match(const TokenMatrix& preds, const TokenMatrix& targets) {
  check_same_shape(preds, targets);
  const std::size_t n = preds.rows();
  if (n == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    auto p = preds.row(r);
    auto t = targets.row(r);
    hits += std::equal(p.begin(), p.end(), t.begin());
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

std::vector<double> per_position_accuracy(const TokenMatrix& preds,
                                          const TokenMatrix& targets) {
  check_same_shape(preds, targets);
  std::vector<double> acc(preds.cols, 0.0);
  const std::size_t n = preds.rows();
  if (n == 0) return acc;
  std::vector<std::size_t> hits(preds.cols, 0);
  for (std::size_t i = 0; i < preds.ids.size(); ++i) {
    hits[i % preds.cols] += preds.ids[i] == targets.ids[i];
  }
  for (std::size_t j = 0; j < acc.size(); ++j) {
    acc[j] = static_cast<double>(hits[j]) / static_cast<double>(n);
  }
  return acc;
}

MetricRow score_predictions(const TokenMatrix& preds, const TokenMatrix& targets,
                            const TaskSpec& task) {
  MetricRow row;
  row.exact_match = exact_match(preds, targets);
  row.per_position = per_position_accuracy(preds, targets);
  row.sample_count = preds.rows();
  std::size_t malformed = 0;
  for (std::size_t r = 0; r < preds.rows(); ++r) {
    malformed += !decode_output(preds.row(r), task).has_value();
  }
  row.malformed_rate =
      row.sample_count ? static_cast<double>(malformed) / static_cast<double>(row.sample_count) : 0.0;
  return row;
}

template <typename T>
TokenMatrix predict_examples(const Model<T>& model, const TaskSpec& task,
                             std::span<const Example> examples, std::size_t batch) {
  if (model.config().n_out != task.n_out()) {
    throw std::invalid_argument("predict_examples: model n_out " +
                                std::to_string(model.config().n_out) + " vs task n_out " +
                                std::to_string(task.n_out()));
  }
  const std::size_t L = static_cast<std::size_t>(task.input_length());
  TokenMatrix out;
  out.cols = static_cast<std::size_t>(task.n_out());
  out.ids.reserve(examples.size() * out.cols);
  std::vector<TokenId> ids;
  for (std::size_t start = 0; start < examples.size(); start += batch) {
    const std::size_t b = std::min(batch, examples.size() - start);
    ids.clear();
    for (std::size_t i = 0; i < b; ++i) {
      auto enc = encode_example(examples[start + i], task);
      ids.insert(ids.end(), enc.input.begin(), enc.input.end());
    }
    auto pred = model.predict(ids, b, L);
    out.ids.insert(out.ids.end(), pred.begin(), pred.end());
  }
  return out;
}

template <typename T>
std::vector<MetricRow> length_profile(const Model<T>& model, const TaskSpec& task,
                                      std::span<const int> lengths, int N_test, Rng& rng,
                                      int n_train) {
  std::vector<MetricRow> rows;
  for (int n : lengths) {
    if (n < 1 || n > task.n_test) {
      throw std::invalid_argument("length_profile: length " + std::to_string(n) +
                                  " outside the task's input width [1, " +
                                  std::to_string(task.n_test) + "]");
    }
    EvalSet set = make_eval_set(task, n, N_test, rng, n_train);
    auto preds = predict_examples(model, task, set.examples);
    MetricRow row = score_predictions(preds, target_matrix(set.examples, task), task);
    row.length = n;
    rows.push_back(std::move(row));
  }
  return rows;
}

FailureReport failure_report(std::span<const Example> examples, const TokenMatrix& preds,
                             const TaskSpec& task, CarryBuckets carries) {
  if (carries == CarryBuckets::include && !task.add_family()) {
    throw std::invalid_argument("failure_report: carry buckets are defined for "
                                "addition-family tasks only");
  }
  TokenMatrix targets = target_matrix(examples, task);
  check_same_shape(preds, targets);
  FailureReport rep;
  rep.has_carry_buckets = carries == CarryBuckets::include;
  rep.total = examples.size();
  std::map<int, std::size_t> err_counts, err_pos;
  for (std::size_t r = 0; r < examples.size(); ++r) {
    auto p = preds.row(r);
    auto t = targets.row(r);
    int wrong = 0;
    int last_wrong = -1;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] != t[j]) {
        ++wrong;
        last_wrong = static_cast<int>(j);
      }
    }
    const bool ok = wrong == 0;
    if (rep.has_carry_buckets) {
      auto cp = carry_profile(examples[r].x1, examples[r].x2);
      auto& nc = rep.by_nc[cp.nc];
      auto& mc = rep.by_mc[cp.mc];
      ++nc.count;
      ++mc.count;
      nc.correct += ok;
      mc.correct += ok;
    }
    if (!ok) {
      ++rep.wrong;
      ++err_counts[wrong];
      if (wrong == 1) {
        ++rep.single_errors;
        ++err_pos[last_wrong + 1];
      }
    }
  }
  for (auto [k, c] : err_counts) {
    rep.wrong_digit_count_hist[k] = static_cast<double>(c) / static_cast<double>(rep.wrong);
  }
  for (auto [k, c] : err_pos) {
    rep.single_error_position_hist[k] =
        static_cast<double>(c) / static_cast<double>(rep.single_errors);
  }
  return rep;
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ls(line);
  while (std::getline(ls, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::runtime_error(path.string() + ": bad number '" + s + "'");
  }
  return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table) {
  if (table.run_ids.size() != table.rows.size()) {
    throw std::invalid_argument("write_metrics_csv: run_ids and rows differ in length");
  }
  std::size_t n_pos = 0;
  for (const auto& r : table.rows) n_pos = std::max(n_pos, r.per_position.size());
  auto out = open_out(path);
  out << "run_id,step,epoch,length,exact_match,malformed_rate";
  for (std::size_t j = 1; j <= n_pos; ++j) out << ",pos_" << j;
  out << ",sample_count\n";
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    out << table.run_ids[i] << ',' << r.step << ',' << format_double(r.epoch) << ','
        << r.length << ',' << format_double(r.exact_match) << ','
        << format_double(r.malformed_rate);
    for (std::size_t j = 0; j < n_pos; ++j) {
      out << ',';
      if (j < r.per_position.size()) out << format_double(r.per_position[j]);
    }
    out << ',' << r.sample_count << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_metrics_csv(const std::filesystem::path& path, const std::string& run_id,
                       std::span<const MetricRow> rows) {
  MetricsTable t;
  t.rows.assign(rows.begin(), rows.end());
  t.run_ids.assign(rows.size(), run_id);
  write_metrics_csv(path, t);
}

MetricsTable read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": missing header");
  auto header = split_csv_line(line);
  if (header.size() < 7 || header[0] != "run_id" || header.back() != "sample_count") {
    throw std::runtime_error(path.string() + ": not a metrics.csv header");
  }
  const std::size_t n_pos = header.size() - 7;
  MetricsTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error(path.string() + ": row has " + std::to_string(cells.size()) +
                               " cells, header has " + std::to_string(header.size()));
    }
    MetricRow r;
    t.run_ids.push_back(cells[0]);
    r.step = std::stol(cells[1]);
    r.epoch = parse_double(cells[2], path);
    r.length = std::stoi(cells[3]);
    r.exact_match = parse_double(cells[4], path);
    r.malformed_rate = parse_double(cells[5], path);
    for (std::size_t j = 0; j < n_pos; ++j) {
      if (!cells[6 + j].empty()) r.per_position.push_back(parse_double(cells[6 + j], path));
    }
    r.sample_count = std::stoul(cells.back());
    t.rows.push_back(std::move(r));
  }
  return t;
}

std::vector<FailureRow> failure_rows(const std::string& run_id, const FailureReport& rep) {
  std::vector<FailureRow> rows;
  for (const auto& [v, s] : rep.by_nc) rows.push_back({run_id, "nc", v, s.count, s.accuracy()});
  for (const auto& [v, s] : rep.by_mc) rows.push_back({run_id, "mc", v, s.count, s.accuracy()});
  for (const auto& [v, f] : rep.wrong_digit_count_hist) {
    rows.push_back({run_id, "err_count", v,
                    static_cast<std::size_t>(std::llround(f * static_cast<double>(rep.wrong))), f});
  }
  for (const auto& [v, f] : rep.single_error_position_hist) {
    rows.push_back({run_id, "err_pos", v,
                    static_cast<std::size_t>(std::llround(f * static_cast<double>(rep.single_errors))),
                    f});
  }
  return rows;
}

void write_failure_csv(const std::filesystem::path& path, const std::string& run_id,
                       const FailureReport& report) {
  auto out = open_out(path);
  out << "run_id,bucket_kind,bucket_value,count,accuracy_or_freq\n";
  for (const auto& r : failure_rows(run_id, report)) {
    out << r.run_id << ',' << r.bucket_kind << ',' << r.bucket_value << ',' << r.count << ','
        << format_double(r.accuracy_or_freq) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<FailureRow> read_failure_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "run_id,bucket_kind,bucket_value,count,accuracy_or_freq") {
    throw std::runtime_error(path.string() + ": not a failure.csv header");
  }
  std::vector<FailureRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto c = split_csv_line(line);
    if (c.size() != 5) throw std::runtime_error(path.string() + ": malformed row");
    rows.push_back({c[0], c[1], std::stoi(c[2]), std::stoul(c[3]), parse_double(c[4], path)});
  }
  return rows;
}

template TokenMatrix predict_examples(const Model<float>&, const TaskSpec&,
                                      std::span<const Example>, std::size_t);
template TokenMatrix predict_examples(const Model<double>&, const TaskSpec&,
                                      std::span<const Example>, std::size_t);
template std::vector<MetricRow> length_profile(const Model<float>&, const TaskSpec&,
                                               std::span<const int>, int, Rng&, int);
template std::vector<MetricRow> length_profile(const Model<double>&, const TaskSpec&,
                                               std::span<const int>, int, Rng&, int);

}  // namespace lengen
