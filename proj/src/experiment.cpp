#include "lengen/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

#ifndef LENGEN_VERSION
#define LENGEN_VERSION "0.0.0"
#endif

namespace lengen {

namespace fs = std::filesystem;

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + std::string(text) + "' (f32 or f64)");
}

std::string code_version() { return LENGEN_VERSION; }

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw ConfigError(key, "expected a number, got '" + text + "'");
  }
  return v;
}

std::string iso_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const KeyValues& default_values() {
  static const KeyValues kDefaults = {
      {"scale", "1"},
      {"task.kind", "add"},
      {"task.n_train", "5"},
      {"task.n_test", "20"},
      {"task.eval_lengths", ""},
      {"task.n2_max", "3"},
      {"task.modulus", "0"},
      {"data.N_train", "5000"},
      {"data.N_test", "10000"},
      {"data.seed", "0"},
      {"model.size", "base"},
      {"model.depth", ""},
      {"model.d_model", ""},
      {"model.heads", ""},
      {"model.ffn_mult", "4"},
      {"model.pe", "rpe_k"},
      {"model.shared_layers", "false"},
      {"model.share_relative_tables", "false"},
      {"model.k_clip", "16"},
      {"model.max_positions", "64"},
      {"model.dropout", "0"},
      {"train.procedure", "standard"},
      {"train.priming_rate", "0"},
      {"train.priming_weights", ""},
      {"train.finetune_checkpoint", ""},
      {"train.finetune_target", "0"},
      {"train.finetune_examples", "0"},
      {"train.epochs", "15000"},
      {"train.batch", "32"},
      {"train.lr", "1e-4"},
      {"train.weight_decay", "1e-3"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.grad_clip", "0"},
      {"train.eval_every", "25"},
      {"train.precision", "f32"},
      {"output.run_id", ""},
      {"output.checkpoint_every", "0"},
  };
  return kDefaults;
}

using Preset = std::vector<std::pair<std::string, std::string>>;

const std::map<std::string, Preset>& presets() {
  static const std::map<std::string, Preset> kPresets = [] {
    std::map<std::string, Preset> p;
    const Preset addition{{"task.kind", "add"}, {"task.n_train", "5"}, {"task.n_test", "20"},
                          {"task.eval_lengths", "5-20"}};
    auto with = [](Preset base, const Preset& extra) {
      base.insert(base.end(), extra.begin(), extra.end());
      return base;
    };
    for (const auto& [pe, name] : {std::pair{"ape", "ape"}, {"rpe_k", "rpek"}, {"rpe_kq", "rpekq"}}) {
      for (const char* size : {"base", "standard", "large"}) {
        p["addition-" + std::string(name) + "-" + size] =
            with(addition, {{"model.pe", pe}, {"model.size", size}});
        p["addition-" + std::string(name) + "-ut-" + size] = with(
            addition, {{"model.pe", pe}, {"model.size", size}, {"model.shared_layers", "true"}});
      }
      p["elementwise-add-" + std::string(name)] =
          with(addition, {{"task.kind", "elementwise_add"}, {"model.pe", pe}});
      for (const char* c : {"100", "101", "128", "1000"}) {
        p["mod-add-" + std::string(c) + "-" + name] =
            with(addition, {{"task.kind", "mod_add"},
                            {"task.modulus", c},
                            {"model.pe", pe},
                            {"model.shared_layers", "true"}});
        p["mod-mul-" + std::string(c) + "-" + name] = {{"task.kind", "mod_mul"},
                                                       {"task.modulus", c},
                                                       {"task.n_train", "5"},
                                                       {"task.n_test", "35"},
                                                       {"task.eval_lengths", "5-35"},
                                                       {"model.pe", pe},
                                                       {"model.shared_layers", "true"}};
      }
    }
    const Preset mul{{"task.kind", "mul"},        {"task.n_train", "5"},
                     {"task.n_test", "35"},       {"task.n2_max", "3"},
                     {"task.eval_lengths", "5-35"}, {"model.size", "standard"},
                     {"model.shared_layers", "true"}, {"model.pe", "rpe_k"}};
    p["mul-rpek-standard"] = mul;
    p["mul-finetune-35"] = with(mul, {{"train.procedure", "fine_tune"},
                                      {"train.finetune_target", "35"},
                                      {"train.finetune_examples", "1000"}});
    p["mul-priming-50"] = with(mul, {{"train.procedure", "priming"},
                                     {"train.priming_rate", "0.01"},
                                     {"train.priming_weights", "single:35"}});
    p["mul-priming-all-lengths"] = with(mul, {{"train.procedure", "priming"},
                                              {"train.priming_rate", "0.1"},
                                              {"train.priming_weights", "uniform:6-35"}});
    p["mul-priming-even"] = with(mul, {{"train.procedure", "priming"},
                                       {"train.priming_rate", "0.1"},
                                       {"train.priming_weights", "even:6-34"}});

    // Desk-scale variants that finish on one CPU core.
    const Preset desk_add{{"task.kind", "add"},        {"task.n_train", "3"},
                          {"task.n_test", "4"},        {"task.eval_lengths", "1-4"},
                          {"data.N_train", "999"},     {"data.N_test", "2000"},
                          {"model.size", "custom"},    {"model.depth", "2"},
                          {"model.d_model", "64"},     {"model.heads", "4"},
                          {"train.epochs", "2000"},    {"train.lr", "1e-3"},
                          {"train.eval_every", "100"}};
    p["desk-addition-rpek"] = with(desk_add, {{"model.pe", "rpe_k"}});
    p["desk-addition-ape"] = with(desk_add, {{"model.pe", "ape"}});
    const Preset desk_mul{{"task.kind", "mul"},          {"task.n_train", "3"},
                          {"task.n_test", "6"},          {"task.n2_max", "1"},
                          {"task.eval_lengths", "3,6"},  {"data.N_train", "500"},
                          {"data.N_test", "1000"},       {"model.size", "custom"},
                          {"model.depth", "2"},          {"model.d_model", "128"},
                          {"model.heads", "4"},          {"model.pe", "rpe_k"},
                          {"train.epochs", "1000"},      {"train.lr", "1e-3"},
                          {"train.eval_every", "50"}};
    p["desk-mul-standard"] = desk_mul;
    p["desk-mul-priming"] = with(desk_mul, {{"train.procedure", "priming"},
                                            {"train.priming_rate", "0.1"},
                                            {"train.priming_weights", "single:6"}});
    p["desk-overfit"] = {{"task.kind", "add"},     {"task.n_train", "2"},
                         {"task.n_test", "2"},     {"task.eval_lengths", "2"},
                         {"data.N_train", "64"},   {"data.N_test", "64"},
                         {"model.size", "custom"}, {"model.depth", "2"},
                         {"model.d_model", "64"},  {"model.heads", "4"},
                         {"train.epochs", "1000"}, {"train.lr", "1e-3"},
                         {"train.weight_decay", "0"}, {"train.eval_every", "100"}};
    return p;
  }();
  return kPresets;
}

}  // namespace

std::vector<int> parse_int_list(std::string_view text) {
  std::vector<int> out;
  if (trim(text).empty()) return out;
  for (const auto& part : split(text, ',')) {
    auto dash = part.find('-', 1);
    if (dash == std::string::npos) {
      out.push_back(parse_number<int>("list", part));
      continue;
    }
    int lo = parse_number<int>("list", trim(part.substr(0, dash)));
    int hi = parse_number<int>("list", trim(part.substr(dash + 1)));
    if (lo > hi) throw std::invalid_argument("bad range '" + part + "'");
    for (int v = lo; v <= hi; ++v) out.push_back(v);
  }
  return out;
}

// ---------------------------------------------------------------------------

ExperimentConfig::ExperimentConfig() : values_(default_values()) {}

std::vector<std::string> ExperimentConfig::preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, v] : presets()) names.push_back(k);
  return names;
}

ExperimentConfig ExperimentConfig::preset(std::string_view name) {
  auto it = presets().find(std::string(name));
  if (it == presets().end()) throw ConfigError("preset", "unknown preset '" + std::string(name) + "'");
  ExperimentConfig c;
  for (const auto& [k, v] : it->second) c.set(k, v);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::vector<std::pair<std::string, std::string>> lines;
  std::string line;
  int line_no = 0;
  std::optional<std::string> preset_name;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key == "preset") preset_name = value;
    else lines.emplace_back(key, value);
  }
  ExperimentConfig c = preset_name ? preset(*preset_name) : ExperimentConfig{};
  for (const auto& [k, v] : lines) c.set(k, v);
  return c;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (!default_values().contains(key)) throw ConfigError(key, "unknown configuration key");
  values_[key] = value;
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(key, "unknown configuration key");
  return it->second;
}

int ExperimentConfig::get_int(const std::string& key) const {
  return parse_number<int>(key, get(key));
}

std::uint64_t ExperimentConfig::get_u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, get(key));
}

double ExperimentConfig::get_double(const std::string& key) const {
  return parse_number<double>(key, get(key));
}

bool ExperimentConfig::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

namespace {

int scaled(double value, double scale) {
  return std::max(1, static_cast<int>(std::lround(value * scale)));
}

template <typename F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace

TaskSpec ExperimentConfig::task() const {
  auto kind = wrap("task.kind", [&] { return parse_task_kind(get("task.kind")); });
  const int n_test = get_int("task.n_test");
  const int n2_max = get_int("task.n2_max");
  const auto modulus = get_u64("task.modulus");
  if (n_test < 1) throw ConfigError("task.n_test", "must be >= 1");
  if (n2_max < 1) throw ConfigError("task.n2_max", "must be >= 1");
  TaskSpec probe{kind, n_test, n2_max, modulus};
  if (probe.modular() && modulus <= 1) throw ConfigError("task.modulus", "modular tasks need modulus > 1");
  return TaskSpec::make(kind, n_test, n2_max, modulus);
}

std::vector<int> ExperimentConfig::eval_lengths() const {
  auto lengths = wrap("task.eval_lengths", [&] { return parse_int_list(get("task.eval_lengths")); });
  if (lengths.empty()) {
    for (int n = 1; n <= get_int("task.n_test"); ++n) lengths.push_back(n);
  }
  return lengths;
}

TrainPlan ExperimentConfig::plan() const {
  TrainPlan p;
  p.task = task();
  p.procedure = wrap("train.procedure", [&] { return parse_procedure(get("train.procedure")); });
  p.n_train = get_int("task.n_train");
  p.N_train = scaled(get_int("data.N_train"), get_double("scale"));
  p.seed = get_u64("data.seed");
  if (p.procedure == Procedure::priming) {
    PrimingConfig pc;
    pc.rate = get_double("train.priming_rate");
    if (!(pc.rate >= 0 && pc.rate < 1)) throw ConfigError("train.priming_rate", "must be in [0, 1)");
    if (pc.rate > 0) {
      pc.weights = wrap("train.priming_weights",
                        [&] { return parse_priming_weights(get("train.priming_weights")); });
    }
    p.priming = pc;
  }
  if (p.procedure == Procedure::fine_tune) {
    p.fine_tune = FineTuneTarget{get_int("train.finetune_target"), get_int("train.finetune_examples")};
  }
  return p;
}

ModelConfig ExperimentConfig::model() const {
  const auto& size = get("model.size");
  ModelConfig m;
  if (size != "custom") {
    m = wrap("model.size", [&] { return ModelConfig::preset(parse_size_preset(size)); });
  }
  if (!get("model.depth").empty()) m.depth = get_int("model.depth");
  if (!get("model.d_model").empty()) m.d_model = get_int("model.d_model");
  if (!get("model.heads").empty()) m.heads = get_int("model.heads");
  if (size == "custom" &&
      (get("model.depth").empty() || get("model.d_model").empty() || get("model.heads").empty())) {
    throw ConfigError("model.size", "custom size needs model.depth, model.d_model and model.heads");
  }
  if (m.heads < 1) throw ConfigError("model.heads", "must be >= 1");
  if (const double scale = get_double("scale"); scale != 1.0) {
    m.d_model = std::max(m.heads, scaled(static_cast<double>(m.d_model) / m.heads, scale) * m.heads);
  }
  m.ffn_mult = get_int("model.ffn_mult");
  m.pe = wrap("model.pe", [&] { return parse_pe_kind(get("model.pe")); });
  m.shared_layers = get_bool("model.shared_layers");
  m.share_relative_tables = get_bool("model.share_relative_tables");
  m.k_clip = get_int("model.k_clip");
  m.max_positions = get_int("model.max_positions");
  m.dropout = get_double("model.dropout");
  m.n_out = task().n_out();
  return m;
}

OptimConfig ExperimentConfig::optim() const {
  OptimConfig o;
  o.lr = get_double("train.lr");
  o.weight_decay = get_double("train.weight_decay");
  o.beta1 = get_double("train.beta1");
  o.beta2 = get_double("train.beta2");
  o.grad_clip = get_double("train.grad_clip");
  return o;
}

Schedule ExperimentConfig::schedule() const {
  Schedule s;
  s.epochs = get_int("train.epochs");
  if (s.epochs > 0) s.epochs = scaled(s.epochs, get_double("scale"));
  s.batch = get_int("train.batch");
  s.eval_every = get_int("train.eval_every");
  s.eval_lengths = eval_lengths();
  s.N_test = get_int("data.N_test");
  s.checkpoint_every = get_int("output.checkpoint_every");
  return s;
}

Precision ExperimentConfig::precision() const {
  return wrap("train.precision", [&] { return parse_precision(get("train.precision")); });
}

void ExperimentConfig::validate() const {
  const double scale = get_double("scale");
  if (!(scale > 0)) throw ConfigError("scale", "must be > 0");
  const TaskSpec t = task();
  const int n_train = get_int("task.n_train");
  if (n_train < 1 || n_train > t.n_test) {
    throw ConfigError("task.n_train", "must be in [1, task.n_test]");
  }
  for (int n : eval_lengths()) {
    if (n < 1 || n > t.n_test) {
      throw ConfigError("task.eval_lengths", "length " + std::to_string(n) +
                                                 " outside [1, task.n_test=" +
                                                 std::to_string(t.n_test) + "]");
    }
  }
  if (get_int("data.N_test") < 1) throw ConfigError("data.N_test", "must be >= 1");
  get_u64("data.seed");

  const TrainPlan p = plan();
  if (p.N_train < 1) throw ConfigError("data.N_train", "must be >= 1");
  if (p.procedure != Procedure::fine_tune && n_train <= 18) {
    std::uint64_t domain = 1;
    for (int i = 0; i < n_train; ++i) domain *= 10;
    if (static_cast<std::uint64_t>(p.N_train) >= domain) {
      throw ConfigError("data.N_train", "must be < 10^task.n_train (" + std::to_string(domain) +
                                            ") so the pool is a strict subset");
    }
  }
  if (p.priming) {
    const double rate = p.priming->rate;
    if (!(rate >= 0 && rate < 1)) throw ConfigError("train.priming_rate", "must be in [0, 1)");
    if (rate > 0 && rate * p.N_train < 1) {
      throw ConfigError("train.priming_rate", "rate * N_train < 1 yields no priming example");
    }
    for (auto [n, w] : p.priming->weights) {
      if (n > t.n_test) {
        throw ConfigError("train.priming_weights", "priming length " + std::to_string(n) +
                                                       " exceeds task.n_test");
      }
    }
  }
  if (p.fine_tune) {
    if (get("train.finetune_checkpoint").empty()) {
      throw ConfigError("train.finetune_checkpoint", "required for fine_tune");
    }
    if (p.fine_tune->n_target < 1 || p.fine_tune->n_target > t.n_test) {
      throw ConfigError("train.finetune_target", "must be in [1, task.n_test]");
    }
    if (p.fine_tune->N_fine < 0) throw ConfigError("train.finetune_examples", "must be >= 0");
  }

  const ModelConfig m = model();
  if (m.depth < 1) throw ConfigError("model.depth", "must be >= 1");
  if (m.d_model % m.heads != 0) throw ConfigError("model.heads", "must divide model.d_model");
  if (m.k_clip < 1) throw ConfigError("model.k_clip", "must be >= 1");
  if (m.dropout < 0 || m.dropout >= 1) throw ConfigError("model.dropout", "must be in [0, 1)");
  if (m.pe == PeKind::ape && t.input_length() > m.max_positions) {
    throw ConfigError("model.max_positions",
                      "APE table of " + std::to_string(m.max_positions) +
                          " positions does not cover input length " +
                          std::to_string(t.input_length()));
  }
  wrap("model", [&] {
    m.validate();
    return 0;
  });

  if (get_int("train.epochs") < 0) throw ConfigError("train.epochs", "must be >= 0");
  if (get_int("train.batch") < 1) throw ConfigError("train.batch", "must be >= 1");
  if (!(get_double("train.lr") > 0)) throw ConfigError("train.lr", "must be > 0");
  if (get_double("train.weight_decay") < 0) throw ConfigError("train.weight_decay", "must be >= 0");
  if (get_int("train.eval_every") < 1) throw ConfigError("train.eval_every", "must be >= 1");
  if (get_double("train.grad_clip") < 0) throw ConfigError("train.grad_clip", "must be >= 0");
  if (get_int("output.checkpoint_every") < 0) {
    throw ConfigError("output.checkpoint_every", "must be >= 0");
  }
  precision();
}

std::string ExperimentConfig::dump() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
  return os.str();
}

void ExperimentConfig::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << dump();
}

// ---------------------------------------------------------------------------

void write_manifest(const fs::path& path, const RunManifest& m) {
  nlohmann::ordered_json j;
  j["code_version"] = m.code_version;
  j["seed"] = m.seed;
  j["started"] = m.started;
  j["finished"] = m.finished;
  j["status"] = m.status;
  j["diagnostic"] = m.diagnostic;
  j["config"] = m.config;
  j["artifacts"] = m.artifacts;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  RunManifest m;
  m.code_version = j.at("code_version").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
  m.status = j.at("status").get<std::string>();
  m.diagnostic = j.value("diagnostic", "");
  m.config = j.at("config").get<KeyValues>();
  m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  return m;
}

namespace {

void write_epochs_csv(const fs::path& path, std::span<const EpochRecord> epochs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,step,lr,loss,fixed_hash\n";
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.step << ',' << format_double(e.lr) << ',' << format_double(e.loss)
        << ',' << e.fixed_hash << '\n';
  }
}

template <typename T>
TrainResult<T> run_training(const ExperimentConfig& config, Schedule schedule) {
  const TrainPlan plan = config.plan();
  if (plan.procedure != Procedure::fine_tune) {
    return train<T>(plan, config.model(), config.optim(), schedule);
  }
  auto ck = load_checkpoint<T>(config.get("train.finetune_checkpoint"));
  const TaskSpec source = task_from_metadata(ck.metadata);
  TrainPlan ft = plan;
  if (auto it = ck.metadata.find("task.n_train"); it != ck.metadata.end()) {
    ft.n_train = std::stoi(it->second);
  }
  return fine_tune<T>(std::move(ck.model), source, ft, config.optim(), std::move(schedule));
}

}  // namespace

RunOutcome cmd_train(const ExperimentConfig& config, const fs::path& out_dir, const LogFn& log) {
  config.validate();
  fs::create_directories(out_dir);
  RunOutcome outcome;
  outcome.dir = out_dir;
  RunManifest& man = outcome.manifest;
  man.config = config.values();
  man.code_version = code_version();
  man.seed = config.get_u64("data.seed");
  man.started = iso_now();
  config.save(out_dir / "config.txt");

  std::string run_id = config.get("output.run_id");
  if (run_id.empty()) run_id = out_dir.filename().string();
  if (run_id.empty()) run_id = "run";

  Schedule schedule = config.schedule();
  schedule.checkpoint_dir = out_dir / "checkpoints";
  schedule.log = log;

  try {
    if (config.precision() == Precision::f64) {
      outcome.record = run_training<double>(config, schedule).record;
    } else {
      outcome.record = run_training<float>(config, schedule).record;
    }
    man.status = outcome.record.diverged ? "diverged" : "ok";
    man.diagnostic = outcome.record.diagnostic;
  } catch (const std::exception& e) {
    man.status = "failed";
    man.diagnostic = e.what();
    man.finished = iso_now();
    write_manifest(out_dir / "manifest.json", man);
    throw;
  }
  outcome.record.run_id = run_id;
  write_metrics_csv(out_dir / "metrics.csv", run_id, outcome.record.metrics);
  write_epochs_csv(out_dir / "epochs.csv", outcome.record.epochs);
  man.finished = iso_now();
  man.artifacts = {{"config", "config.txt"},
                   {"metrics", "metrics.csv"},
                   {"epochs", "epochs.csv"}};
  if (!outcome.record.final_checkpoint.empty()) {
    man.artifacts["checkpoint"] = fs::relative(outcome.record.final_checkpoint, out_dir).string();
  }
  write_manifest(out_dir / "manifest.json", man);
  return outcome;
}

void write_predictions_tsv(const fs::path& path, std::span<const Example> examples,
                           const TokenMatrix& preds) {
  if (preds.rows() != examples.size()) {
    throw std::invalid_argument("write_predictions_tsv: row count mismatch");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out << examples[i].x1.str() << '\t' << examples[i].x2.str() << '\t' << examples[i].y.str()
        << '\t' << vocab::render(preds.row(i)) << '\n';
  }
}

namespace {

template <typename T>
std::vector<MetricRow> eval_checkpoint(const fs::path& checkpoint, const EvalOptions& opts,
                                       const fs::path& out_dir, const LogFn& log) {
  auto ck = load_checkpoint<T>(checkpoint);
  const TaskSpec task = task_from_metadata(ck.metadata);
  if (ck.model.config().n_out != task.n_out()) {
    throw std::invalid_argument("checkpoint model n_out does not match its task metadata");
  }
  int n_train = 0;
  if (auto it = ck.metadata.find("task.n_train"); it != ck.metadata.end()) {
    n_train = std::stoi(it->second);
  }
  long step = 0;
  if (auto it = ck.metadata.find("run.steps"); it != ck.metadata.end()) step = std::stol(it->second);

  std::vector<int> lengths = opts.lengths;
  if (lengths.empty()) {
    for (int n = 1; n <= task.n_test; ++n) lengths.push_back(n);
  }
  for (int n : lengths) {
    if (n < 1 || n > task.n_test) {
      throw std::invalid_argument("eval: length " + std::to_string(n) +
                                  " does not fit the checkpoint's input width n_test=" +
                                  std::to_string(task.n_test));
    }
  }
  fs::create_directories(out_dir);
  Rng rng = derive_rng(opts.seed, streams::kEval);
  std::vector<MetricRow> rows;
  std::vector<FailureRow> failure;
  for (int n : lengths) {
    EvalSet set = make_eval_set(task, n, opts.N_test, rng, n_train);
    auto preds = predict_examples(ck.model, task, set.examples);
    MetricRow row = score_predictions(preds, target_matrix(set.examples, task), task);
    row.length = n;
    row.step = step;
    if (log) log("length " + std::to_string(n) + " exact_match=" + format_double(row.exact_match));
    rows.push_back(std::move(row));
    if (opts.write_predictions) {
      write_predictions_tsv(out_dir / ("predictions_" + std::to_string(n) + ".tsv"),
                            set.examples, preds);
    }
    if (opts.failure_report) {
      auto rep = failure_report(set.examples, preds, task,
                                task.add_family() ? CarryBuckets::include : CarryBuckets::skip);
      auto fr = failure_rows(opts.run_id + "@" + std::to_string(n), rep);
      failure.insert(failure.end(), fr.begin(), fr.end());
    }
  }
  write_metrics_csv(out_dir / "metrics.csv", opts.run_id, rows);
  if (opts.failure_report) {
    std::ofstream out(out_dir / "failure.csv");
    if (!out) throw std::runtime_error("cannot write " + (out_dir / "failure.csv").string());
    out << "run_id,bucket_kind,bucket_value,count,accuracy_or_freq\n";
    for (const auto& r : failure) {
      out << r.run_id << ',' << r.bucket_kind << ',' << r.bucket_value << ',' << r.count << ','
          << format_double(r.accuracy_or_freq) << '\n';
    }
  }
  return rows;
}

}  // namespace

std::vector<MetricRow> cmd_eval(const fs::path& checkpoint, const EvalOptions& opts,
                                const fs::path& out_dir, const LogFn& log) {
  if (opts.N_test < 1) throw std::invalid_argument("eval: N_test must be >= 1");
  if (opts.precision == Precision::f64) return eval_checkpoint<double>(checkpoint, opts, out_dir, log);
  return eval_checkpoint<float>(checkpoint, opts, out_dir, log);
}

void cmd_gen(const ExperimentConfig& config, const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  const TrainPlan plan = config.plan();
  if (plan.procedure != Procedure::fine_tune || plan.fine_tune) {
    TrainSet set = make_train_set(plan);
    Rng rng = derive_rng(plan.seed, streams::kData);
    auto epoch = set.epoch(rng);
    write_examples_tsv(out_dir / "train_epoch1.tsv", epoch);
    write_examples_tsv(out_dir / "fixed.tsv", set.fixed());
  }
  Rng eval_rng = derive_rng(plan.seed, streams::kEval);
  for (int n : config.eval_lengths()) {
    auto set = make_eval_set(plan.task, n, config.get_int("data.N_test"), eval_rng, plan.n_train);
    write_examples_tsv(out_dir / ("eval_" + std::to_string(n) + ".tsv"), set.examples);
  }
  config.save(out_dir / "config.txt");
}

FailureReport cmd_report(const fs::path& predictions, const TaskSpec& task,
                         const fs::path& failure_csv, const std::string& run_id) {
  std::ifstream in(predictions);
  if (!in) throw std::runtime_error("cannot open " + predictions.string());
  std::vector<Example> examples;
  TokenMatrix preds;
  preds.cols = static_cast<std::size_t>(task.n_out());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split(line, '\t');
    auto where = predictions.string() + ":" + std::to_string(line_no);
    if (cells.size() != 4) throw std::runtime_error(where + ": expected 4 tab-separated fields");
    try {
      examples.push_back({DigitString(cells[0]), DigitString(cells[1]), DigitString(cells[2])});
      auto ids = vocab::parse(cells[3]);
      if (ids.size() != preds.cols) {
        throw std::invalid_argument("prediction has " + std::to_string(ids.size()) +
                                    " tokens, task n_out is " + std::to_string(preds.cols));
      }
      preds.ids.insert(preds.ids.end(), ids.begin(), ids.end());
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  auto rep = failure_report(examples, preds, task,
                            task.add_family() ? CarryBuckets::include : CarryBuckets::skip);
  write_failure_csv(failure_csv, run_id, rep);
  return rep;
}

// ---------------------------------------------------------------------------

SweepSpec load_sweep(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open sweep file " + path.string());
  SweepSpec spec;
  std::vector<std::pair<std::string, std::string>> base_lines;
  std::optional<std::string> preset_name;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key == "preset") {
      preset_name = value;
    } else if (key.starts_with("sweep.axis.")) {
      auto axis = key.substr(11);
      if (!default_values().contains(axis)) throw ConfigError(key, "unknown configuration key");
      spec.axes.emplace_back(axis, split(value, ','));
    } else if (key == "sweep.seeds") {
      spec.seeds.clear();
      for (int s : parse_int_list(value)) spec.seeds.push_back(static_cast<std::uint64_t>(s));
    } else if (key == "sweep.workers") {
      spec.workers = parse_number<int>(key, value);
    } else if (key == "sweep.threshold") {
      spec.threshold = parse_number<double>(key, value);
    } else if (key.starts_with("search.priming.")) {
      auto& ps = spec.priming_search ? *spec.priming_search : spec.priming_search.emplace();
      auto field = key.substr(15);
      if (field == "lo") ps.lo = parse_number<double>(key, value);
      else if (field == "hi") ps.hi = parse_number<double>(key, value);
      else if (field == "step") ps.step = parse_number<double>(key, value);
      else if (field == "target_length") ps.target_length = parse_number<int>(key, value);
      else if (field == "accuracy") ps.accuracy = parse_number<double>(key, value);
      else throw ConfigError(key, "unknown priming search field");
    } else {
      base_lines.emplace_back(key, value);
    }
  }
  spec.base = preset_name ? ExperimentConfig::preset(*preset_name) : ExperimentConfig{};
  for (const auto& [k, v] : base_lines) spec.base.set(k, v);
  if (spec.seeds.empty()) throw ConfigError("sweep.seeds", "needs at least one seed");
  if (spec.workers < 1) throw ConfigError("sweep.workers", "must be >= 1");
  if (const auto& ps = spec.priming_search) {
    if (!(ps->lo >= 0 && ps->lo <= ps->hi && ps->hi < 1)) {
      throw ConfigError("search.priming.hi", "need 0 <= lo <= hi < 1");
    }
    if (!(ps->step > 0)) throw ConfigError("search.priming.step", "must be > 0");
    if (ps->target_length < 1) throw ConfigError("search.priming.target_length", "must be >= 1");
  }
  return spec;
}

std::optional<int> threshold_length(const std::map<int, double>& accuracy_by_length,
                                    double threshold) {
  std::optional<int> best;
  for (auto [n, acc] : accuracy_by_length) {
    if (acc >= threshold) best = n;
  }
  return best;
}

std::map<int, double> mean_final_accuracy(std::span<const MetricsTable> runs) {
  std::map<int, double> sum;
  std::map<int, int> count;
  for (const auto& run : runs) {
    long last = -1;
    for (const auto& r : run.rows) last = std::max(last, r.step);
    for (const auto& r : run.rows) {
      if (r.step != last) continue;
      sum[r.length] += r.exact_match;
      ++count[r.length];
    }
  }
  for (auto& [n, s] : sum) s /= count[n];
  return sum;
}

std::optional<double> bisect_priming_rate(const std::function<bool(double)>& success, double lo,
                                          double hi, double step) {
  if (!(lo <= hi) || !(step > 0)) throw std::invalid_argument("bisect: need lo <= hi, step > 0");
  if (!success(hi)) return std::nullopt;
  if (success(lo)) return lo;
  while (hi - lo > step) {
    const double mid = 0.5 * (lo + hi);
    (success(mid) ? hi : lo) = mid;
  }
  return hi;
}

namespace {

struct SweepJob {
  std::size_t cell;
  std::uint64_t seed;
  KeyValues overrides;
  fs::path dir;
  bool ok = false;
  std::string error;
};

// Runs every job, at most `workers` at a time. Failures are recorded on the
// job and do not stop the others.
void run_jobs(std::vector<SweepJob>& jobs, const ExperimentConfig& base, int workers,
              const LogFn& log) {
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(mu);
    log(msg);
  };
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      SweepJob& job = jobs[i];
      try {
        ExperimentConfig cfg = base;
        for (const auto& [k, v] : job.overrides) cfg.set(k, v);
        cfg.set("data.seed", std::to_string(job.seed));
        cfg.set("output.run_id", job.dir.parent_path().filename().string() + "_seed" +
                                     std::to_string(job.seed));
        say("sweep: " + job.dir.string());
        auto outcome = cmd_train(cfg, job.dir);
        job.ok = !outcome.record.diverged;
        if (!job.ok) job.error = outcome.record.diagnostic;
      } catch (const std::exception& e) {
        job.error = e.what();
      }
      if (!job.ok) say("sweep: run failed: " + job.dir.string() + ": " + job.error);
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  if (n == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < n; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

std::string rate_label(double rate) {
  std::string s = format_double(rate);
  std::replace(s.begin(), s.end(), '.', 'p');
  return s;
}

}  // namespace

std::vector<SweepCell> cmd_sweep(const SweepSpec& spec, const fs::path& out_dir, const LogFn& log) {
  std::vector<KeyValues> assignments{{}};
  for (const auto& [key, values] : spec.axes) {
    if (values.empty()) throw ConfigError("sweep.axis." + key, "needs at least one value");
    std::vector<KeyValues> next;
    for (const auto& a : assignments) {
      for (const auto& v : values) {
        KeyValues b = a;
        b[key] = v;
        next.push_back(std::move(b));
      }
    }
    assignments = std::move(next);
  }
  // Fail fast on configs that can never run.
  for (const auto& a : assignments) {
    ExperimentConfig cfg = spec.base;
    for (const auto& [k, v] : a) cfg.set(k, v);
    if (spec.priming_search) {
      cfg.set("train.procedure", "priming");
      cfg.set("train.priming_rate", format_double(spec.priming_search->hi));
    }
    cfg.validate();
  }
  fs::create_directories(out_dir);

  std::vector<SweepCell> cells(assignments.size());
  for (std::size_t c = 0; c < cells.size(); ++c) cells[c].assignment = assignments[c];
  auto cell_dir = [&](std::size_t c) { return out_dir / ("cell_" + std::to_string(c)); };
  auto collect = [&](std::vector<SweepJob>& jobs) {
    for (auto& job : jobs) {
      auto& cell = cells[job.cell];
      if (job.ok) cell.run_dirs.push_back(job.dir);
      else cell.errors.push_back(job.dir.string() + ": " + job.error);
    }
  };
  auto mean_of = [](const std::vector<SweepJob>& jobs) {
    std::vector<MetricsTable> tables;
    for (const auto& job : jobs) {
      if (job.ok) tables.push_back(read_metrics_csv(job.dir / "metrics.csv"));
    }
    return std::pair{mean_final_accuracy(tables), tables.size()};
  };

  if (!spec.priming_search) {
    std::vector<SweepJob> jobs;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      for (auto seed : spec.seeds) {
        jobs.push_back({c, seed, cells[c].assignment, cell_dir(c) / ("seed_" + std::to_string(seed)), false, {}});
      }
    }
    run_jobs(jobs, spec.base, spec.workers, log);
    collect(jobs);
  } else {
    const PrimingSearch& ps = *spec.priming_search;
    std::ofstream probes(out_dir / "priming_search.csv");
    if (!probes) throw std::runtime_error("cannot write priming_search.csv in " + out_dir.string());
    probes << "cell,priming_rate,mean_exact_match,seeds,success\n";
    for (std::size_t c = 0; c < cells.size(); ++c) {
      auto success = [&](double rate) {
        KeyValues overrides = cells[c].assignment;
        overrides["train.procedure"] = "priming";
        overrides["train.priming_rate"] = format_double(rate);
        std::vector<SweepJob> jobs;
        for (auto seed : spec.seeds) {
          jobs.push_back({c, seed, overrides,
                          cell_dir(c) / ("rate_" + rate_label(rate)) / ("seed_" + std::to_string(seed)), false, {}});
        }
        run_jobs(jobs, spec.base, spec.workers, log);
        collect(jobs);
        auto [mean, n] = mean_of(jobs);
        const auto it = mean.find(ps.target_length);
        const double acc = it == mean.end() ? 0.0 : it->second;
        const bool ok = n > 0 && acc >= ps.accuracy;
        probes << c << ',' << format_double(rate) << ',' << format_double(acc) << ',' << n << ','
               << (ok ? 1 : 0) << '\n';
        return ok;
      };
      cells[c].searched = true;
      cells[c].min_priming_rate = bisect_priming_rate(success, ps.lo, ps.hi, ps.step);
    }
  }

  std::ofstream sweep_csv(out_dir / "sweep.csv");
  std::ofstream thr_csv(out_dir / "thresholds.csv");
  if (!sweep_csv || !thr_csv) {
    throw std::runtime_error("cannot write sweep outputs in " + out_dir.string());
  }
  sweep_csv << "cell";
  thr_csv << "cell";
  for (const auto& [key, values] : spec.axes) {
    sweep_csv << ',' << key;
    thr_csv << ',' << key;
  }
  sweep_csv << ",length,mean_exact_match,seeds\n";
  thr_csv << ",threshold,threshold_length,min_priming_rate,failed_runs\n";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    auto& cell = cells[c];
    std::sort(cell.run_dirs.begin(), cell.run_dirs.end());
    std::string prefix = std::to_string(c);
    for (const auto& [key, values] : spec.axes) prefix += "," + cell.assignment.at(key);
    if (!cell.searched) {
      std::vector<MetricsTable> tables;
      for (const auto& d : cell.run_dirs) tables.push_back(read_metrics_csv(d / "metrics.csv"));
      cell.mean_accuracy = mean_final_accuracy(tables);
      cell.threshold_length = threshold_length(cell.mean_accuracy, spec.threshold);
      for (auto [n, acc] : cell.mean_accuracy) {
        sweep_csv << prefix << ',' << n << ',' << format_double(acc) << ',' << tables.size() << '\n';
      }
    }
    thr_csv << prefix << ',' << format_double(spec.threshold) << ','
            << (cell.threshold_length ? std::to_string(*cell.threshold_length) : std::string())
            << ','
            << (cell.min_priming_rate ? format_double(*cell.min_priming_rate) : std::string())
            << ',' << cell.errors.size() << '\n';
  }
  return cells;
}

}  // namespace lengen
