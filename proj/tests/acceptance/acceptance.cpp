// End-to-end acceptance checks. Each criterion prints one line:
//   AC-n PASS|FAIL <measurements>
// Usage: lengen_acceptance [--work DIR] [AC-n ...]   (default: all)

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lengen/experiment.hpp"
#include "support/model_gradcheck.hpp"

using namespace lengen;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work = fs::temp_directory_path() / "lengen_acceptance";

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

void progress(const std::string& line) { std::cerr << "  " << line << '\n'; }

// ---------------------------------------------------------------------------
// AC-1: digit arithmetic against native 128-bit integers.

using u128 = unsigned __int128;

std::string u128_str(u128 v) {
  if (v == 0) return "0";
  std::string s;
  while (v) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  return {s.rbegin(), s.rend()};
}

Outcome ac1() {
  Rng rng(20240101);
  std::uniform_int_distribution<int> width(1, 18);
  auto draw = [&] {
    std::uint64_t hi = 1;
    for (int i = width(rng); i > 0; --i) hi *= 10;
    return std::uniform_int_distribution<std::uint64_t>(0, hi - 1)(rng);
  };
  std::size_t checked = 0, mismatches = 0;
  for (int i = 0; i < 100000; ++i) {
    const std::uint64_t a = draw(), b = draw();
    std::uint64_t m = draw();
    if (m < 2) m = 2;
    const DigitString da(a), db(b);
    mismatches += ds_add(da, db).str() != u128_str(u128(a) + b);
    mismatches += ds_mul(da, db).str() != u128_str(u128(a) * b);
    mismatches += ds_mod(da, m).str() != std::to_string(a % m);
    checked += 3;
  }
  for (std::uint64_t a = 0; a < 1000; ++a) {
    const DigitString da(a);
    for (std::uint64_t b = 0; b < 1000; ++b) {
      const DigitString db(b);
      mismatches += ds_add(da, db).to_u64() != a + b;
      mismatches += ds_mul(da, db).to_u64() != a * b;
      checked += 2;
      if (b > 1) {
        mismatches += ds_mod(da, b).to_u64() != a % b;
        ++checked;
      }
    }
  }
  return {mismatches == 0,
          "checked=" + std::to_string(checked) + " mismatches=" + std::to_string(mismatches)};
}

// ---------------------------------------------------------------------------
// AC-2: encoding round trip and the worked addition example.

Outcome ac2() {
  Rng rng(7);
  std::size_t failures = 0, total = 0;
  const std::vector<TaskSpec> tasks = {
      TaskSpec::make(TaskKind::add, 12),          TaskSpec::make(TaskKind::elementwise_add, 12),
      TaskSpec::make(TaskKind::mul, 12, 3),       TaskSpec::make(TaskKind::mod_add, 12, 3, 101),
      TaskSpec::make(TaskKind::mod_mul, 12, 3, 128)};
  for (const auto& task : tasks) {
    std::uniform_int_distribution<int> len(1, task.n_test);
    for (int i = 0; i < 10000; ++i) {
      auto ex = sample_example(task, len(rng), rng);
      auto back = decode_example(encode_example(ex, task), task);
      failures += !(back && *back == ex);
      ++total;
    }
  }
  const auto task = TaskSpec::make(TaskKind::add, 3);
  auto enc = encode_example({DigitString(12), DigitString(39), DigitString(51)}, task);
  const bool worked = vocab::render(enc.input) == "1 2 <PAD> + 3 9 <PAD>" &&
                      vocab::render(enc.target) == "5 1 <PAD> <PAD>";
  auto enc2 = encode_example({DigitString(999), DigitString(345), DigitString(1344)}, task);
  const bool worked2 =
      vocab::render(enc2.input) == "9 9 9 + 3 4 5" && vocab::render(enc2.target) == "1 3 4 4";
  return {failures == 0 && worked && worked2,
          "round_trips=" + std::to_string(total) + " failures=" + std::to_string(failures) +
              " worked_example=" + (worked && worked2 ? "match" : "MISMATCH")};
}

// ---------------------------------------------------------------------------
// AC-3: finite-difference gradients, 64-bit.

Outcome ac3() {
  constexpr double kTol = 1e-5;
  Rng rng(3);
  std::uniform_int_distribution<TokenId> tok(0, vocab::kSize - 1);
  std::string detail;
  bool pass = true;
  for (auto pe : {PeKind::ape, PeKind::rpe_k, PeKind::rpe_kq}) {
    auto config = testing::tiny_config(pe, 4);
    auto model = Model<double>::init(config, 17);
    const std::size_t B = 2, L = 7;
    std::vector<TokenId> ids(B * L), targets(B * 4);
    for (auto& t : ids) t = tok(rng);
    for (auto& t : targets) t = tok(rng);
    auto r = testing::model_gradient_check(model, ids, B, L, targets);
    pass &= r.max_rel_error < kTol && r.checked > 0;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2e", r.max_rel_error);
    detail += std::string(to_string(pe)) + "=" + buf + " ";
  }
  return {pass, detail + "(max rel error, tol 1e-5)"};
}

// ---------------------------------------------------------------------------
// AC-4: relative-only dependence of first-layer scores.

Outcome ac4() {
  std::map<PeKind, int> toeplitz;
  for (auto pe : {PeKind::ape, PeKind::rpe_k, PeKind::rpe_kq}) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      ModelConfig c;
      c.depth = 2;
      c.d_model = 64;
      c.heads = 4;
      c.pe = pe;
      c.k_clip = 4;
      c.n_out = 4;
      auto m = Model<double>::init(c, seed);
      std::vector<TokenId> ids(12, static_cast<TokenId>(seed % 10));
      Graph<double> g(false);
      std::vector<Tensor<double>> scores;
      ForwardOptions<double> opts;
      opts.capture_scores = &scores;
      m.forward(g, ids, 1, ids.size(), opts);
      toeplitz[pe] += testing::first_layer_scores_toeplitz(scores.at(0), c.k_clip);
    }
  }
  const bool pass = toeplitz[PeKind::rpe_k] == 20 && toeplitz[PeKind::rpe_kq] == 20 &&
                    toeplitz[PeKind::ape] == 0;
  return {pass, "toeplitz rpe_k=" + std::to_string(toeplitz[PeKind::rpe_k]) +
                    "/20 rpe_kq=" + std::to_string(toeplitz[PeKind::rpe_kq]) +
                    "/20 ape=" + std::to_string(toeplitz[PeKind::ape]) + "/20"};
}

// ---------------------------------------------------------------------------
// AC-5: overfit a frozen 64-example 2-digit addition set.

Outcome ac5() {
  const auto task = TaskSpec::make(TaskKind::add, 2);
  Rng rng(55);
  std::vector<Example> ex;
  for (int i = 0; i < 64; ++i) ex.push_back(sample_example(task, 2, rng));
  auto data = make_fixed_train_set(task, ex);
  ModelConfig mc;
  mc.depth = 2;
  mc.d_model = 64;
  mc.heads = 4;
  mc.pe = PeKind::rpe_k;
  mc.n_out = task.n_out();
  OptimConfig oc;
  oc.lr = 1e-3;
  oc.weight_decay = 0;
  Schedule s;
  s.batch = 32;
  s.epochs = static_cast<int>(2000 / steps_per_epoch(data.epoch_size(), s.batch));
  s.eval_at_start = false;
  s.eval_every = s.epochs;
  s.eval_lengths = {2};
  s.N_test = 100;
  auto r = train_on(Model<float>::init(mc, 5), data, 2, oc, s, 5);
  const double acc = exact_match(predict_examples(r.model, task, ex), target_matrix(ex, task));
  return {acc == 1.0 && r.record.steps <= 2000,
          "train_exact_match=" + fmt(acc) + " steps=" + std::to_string(r.record.steps) +
              " wall_s=" + fmt(r.record.wall_seconds, 1)};
}

// ---------------------------------------------------------------------------
// AC-6: APE vs RPE_k length generalization, desk scale.

double final_accuracy(const RunRecord& r, int length) {
  long last = -1;
  double acc = 0;
  for (const auto& m : r.metrics) {
    if (m.length == length && m.step >= last) {
      last = m.step;
      acc = m.exact_match;
    }
  }
  return acc;
}

fs::path ac6_dir(const std::string& pe, int seed) {
  return g_work / "ac6" / pe / ("seed_" + std::to_string(seed));
}

Outcome ac6() {
  std::map<std::string, std::vector<double>> id, ood;
  double wall = 0;
  for (const std::string pe : {"rpe_k", "ape"}) {
    for (int seed = 0; seed < 3; ++seed) {
      auto cfg = ExperimentConfig::preset(pe == "ape" ? "desk-addition-ape" : "desk-addition-rpek");
      cfg.set("data.seed", std::to_string(seed));
      fs::remove_all(ac6_dir(pe, seed));
      auto out = cmd_train(cfg, ac6_dir(pe, seed));
      wall += out.record.wall_seconds;
      id[pe].push_back(final_accuracy(out.record, 3));
      ood[pe].push_back(final_accuracy(out.record, 4));
      progress(pe + " seed " + std::to_string(seed) + ": id=" + fmt(id[pe].back()) +
               " ood4=" + fmt(ood[pe].back()));
    }
  }
  auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  };
  auto min = [](const std::vector<double>& v) { return *std::min_element(v.begin(), v.end()); };
  const bool pass = min(id["rpe_k"]) >= 0.99 && min(id["ape"]) >= 0.99 &&
                    mean(ood["rpe_k"]) >= 0.70 && mean(ood["ape"]) <= 0.10;
  return {pass, "rpe_k id_min=" + fmt(min(id["rpe_k"])) + " ood4_mean=" + fmt(mean(ood["rpe_k"])) +
                    " | ape id_min=" + fmt(min(id["ape"])) + " ood4_mean=" + fmt(mean(ood["ape"])) +
                    " | need id>=0.99, rpe_k ood>=0.70, ape ood<=0.10 | wall_s=" + fmt(wall, 0)};
}

// ---------------------------------------------------------------------------
// AC-7: fine-tuning on longer operands erodes source-length accuracy.

Outcome ac7() {
  const fs::path source = ac6_dir("rpe_k", 0);
  auto ckpt = source / "checkpoints" / "final.ckpt";
  if (!fs::exists(ckpt)) {
    progress("no AC-6 checkpoint; training the source model");
    auto cfg = ExperimentConfig::preset("desk-addition-rpek");
    cfg.set("data.seed", "0");
    cmd_train(cfg, source);
  }
  auto cfg = ExperimentConfig::preset("desk-addition-rpek");
  cfg.set("train.procedure", "fine_tune");
  cfg.set("train.finetune_checkpoint", ckpt.string());
  cfg.set("train.finetune_target", "4");
  cfg.set("train.finetune_examples", "1000");
  cfg.set("train.epochs", "20");
  cfg.set("train.eval_every", "1");
  cfg.set("data.seed", "0");
  const auto dir = g_work / "ac7";
  fs::remove_all(dir);
  auto out = cmd_train(cfg, dir);
  double before = -1, lowest = 2;
  long lowest_step = -1;
  for (const auto& m : out.record.metrics) {
    if (m.length != 3) continue;
    if (m.step == 0) before = m.exact_match;
    else if (m.exact_match < lowest) {
      lowest = m.exact_match;
      lowest_step = m.step;
    }
  }
  const double drop = before - lowest;
  return {before >= 0 && drop >= 0.20,
          "source_acc_before=" + fmt(before) + " lowest_after=" + fmt(lowest) + " at step " +
              std::to_string(lowest_step) + " drop=" + fmt(drop) + " (need >= 0.20)"};
}

// ---------------------------------------------------------------------------
// AC-8: priming composition and the priming effect on multiplication.

Outcome ac8() {
  // (a) composition
  auto plan = ExperimentConfig::preset("mul-priming-50").plan();
  plan.N_train = 5000;
  plan.priming->rate = 0.01;
  auto set = make_train_set(plan);
  bool composition = set.fixed().size() == 50 && set.epoch_size() == 5000;
  for (const auto& e : set.fixed()) composition &= e.x1.size() == 35;
  const auto expected = multiset_hash(set.fixed());
  Rng rng = derive_rng(plan.seed, streams::kData);
  for (int epoch = 0; epoch < 5; ++epoch) {
    std::vector<std::uint8_t> mask;
    auto ex = set.epoch(rng, &mask);
    std::vector<Example> fixed;
    for (std::size_t i = 0; i < ex.size(); ++i) {
      if (mask[i]) fixed.push_back(ex[i]);
    }
    composition &= fixed.size() == 50 && multiset_hash(fixed) == expected;
  }

  // (b) primed vs unprimed at matched step counts
  std::vector<double> primed, plain;
  bool matched = true;
  for (int seed = 0; seed < 3; ++seed) {
    RunRecord rec[2];
    for (int p = 0; p < 2; ++p) {
      auto cfg = ExperimentConfig::preset(p ? "desk-mul-priming" : "desk-mul-standard");
      cfg.set("data.seed", std::to_string(seed));
      auto dir = g_work / "ac8" / (p ? "primed" : "standard") / ("seed_" + std::to_string(seed));
      fs::remove_all(dir);
      rec[p] = cmd_train(cfg, dir).record;
    }
    matched &= rec[0].steps == rec[1].steps;
    plain.push_back(final_accuracy(rec[0], 6));
    primed.push_back(final_accuracy(rec[1], 6));
    progress("seed " + std::to_string(seed) + ": standard=" + fmt(plain.back()) +
             " primed=" + fmt(primed.back()));
  }
  const double gap = (std::accumulate(primed.begin(), primed.end(), 0.0) -
                      std::accumulate(plain.begin(), plain.end(), 0.0)) / 3;
  return {composition && matched && gap >= 0.30,
          std::string("composition=") + (composition ? "exact" : "WRONG") +
              " matched_steps=" + (matched ? "yes" : "NO") + " mean_gap_at_6=" + fmt(gap) +
              " (need >= 0.30)"};
}

// ---------------------------------------------------------------------------
// AC-9: carry buckets against brute force.

Outcome ac9() {
  const auto task = TaskSpec::make(TaskKind::add, 9);
  Rng rng(99);
  std::vector<Example> ex;
  std::uniform_int_distribution<int> len(1, 9);
  for (int i = 0; i < 10000; ++i) ex.push_back(sample_example(task, len(rng), rng));
  auto targets = target_matrix(ex, task);
  auto preds = targets;
  std::uniform_int_distribution<std::size_t> pos(0, preds.cols - 1);
  std::uniform_int_distribution<TokenId> tok(0, 9);
  for (std::size_t r = 0; r < preds.rows(); r += 3) preds.ids[r * preds.cols + pos(rng)] = tok(rng);
  auto rep = failure_report(ex, preds, task);

  std::map<int, std::size_t> nc_count, mc_count;
  for (const auto& e : ex) {
    std::uint64_t a = e.x1.to_u64(), b = e.x2.to_u64();
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
  }
  bool buckets = rep.by_nc.size() == nc_count.size() && rep.by_mc.size() == mc_count.size();
  for (auto [k, c] : nc_count) buckets &= rep.by_nc.count(k) && rep.by_nc.at(k).count == c;
  for (auto [k, c] : mc_count) buckets &= rep.by_mc.count(k) && rep.by_mc.at(k).count == c;
  double h1 = 0, h2 = 0;
  for (auto [k, f] : rep.wrong_digit_count_hist) h1 += f;
  for (auto [k, f] : rep.single_error_position_hist) h2 += f;
  const bool norm = (rep.wrong == 0 || std::abs(h1 - 1) < 1e-12) &&
                    (rep.single_errors == 0 || std::abs(h2 - 1) < 1e-12);
  return {buckets && norm, std::string("buckets=") + (buckets ? "exact" : "MISMATCH") +
                               " hist_sums=" + fmt(h1, 12) + "," + fmt(h2, 12) +
                               " wrong=" + std::to_string(rep.wrong)};
}

// ---------------------------------------------------------------------------
// AC-10: byte-identical metrics from two 64-bit runs.

Outcome ac10() {
  auto cfg = ExperimentConfig::preset("desk-overfit");
  cfg.set("train.precision", "f64");
  cfg.set("train.epochs", "40");
  cfg.set("train.eval_every", "10");
  cfg.set("data.N_test", "200");
  cfg.set("data.seed", "10");
  cfg.set("output.run_id", "ac10");
  std::string bytes[2];
  for (int i = 0; i < 2; ++i) {
    auto dir = g_work / "ac10" / std::to_string(i);
    fs::remove_all(dir);
    cmd_train(cfg, dir);
    std::ifstream in(dir / "metrics.csv", std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    bytes[i] = os.str();
  }
  return {!bytes[0].empty() && bytes[0] == bytes[1],
          "metrics.csv bytes=" + std::to_string(bytes[0].size()) + "," +
              std::to_string(bytes[1].size()) + (bytes[0] == bytes[1] ? " identical" : " DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"AC-1", ac1}, {"AC-2", ac2}, {"AC-3", ac3}, {"AC-4", ac4}, {"AC-5", ac5},
      {"AC-6", ac6}, {"AC-7", ac7}, {"AC-8", ac8}, {"AC-9", ac9}, {"AC-10", ac10}};
  std::vector<std::string> selected;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      selected.push_back(a);
    }
  }
  for (const auto& s : selected) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](auto& c) { return c.first == s; })) {
      std::cerr << "unknown criterion " << s << '\n';
      return 2;
    }
  }
  fs::create_directories(g_work);
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), name) == selected.end()) {
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << name << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << o.detail << " ["
              << fmt(secs, 1) << "s]" << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
