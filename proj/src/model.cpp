#include "lengen/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

namespace lengen {

std::string_view to_string(PeKind pe) {
  switch (pe) {
    case PeKind::ape: return "ape";
    case PeKind::rpe_k: return "rpe_k";
    case PeKind::rpe_kq: return "rpe_kq";
  }
  return "?";
}

PeKind parse_pe_kind(std::string_view text) {
  for (auto pe : {PeKind::ape, PeKind::rpe_k, PeKind::rpe_kq}) {
    if (to_string(pe) == text) return pe;
  }
  throw std::invalid_argument("unknown position embedding '" + std::string(text) +
                              "' (expected ape, rpe_k or rpe_kq)");
}

SizePreset parse_size_preset(std::string_view text) {
  if (text == "base" || text == "B") return SizePreset::base;
  if (text == "standard" || text == "S") return SizePreset::standard;
  if (text == "large" || text == "L") return SizePreset::large;
  throw std::invalid_argument("unknown model size '" + std::string(text) + "'");
}

ModelConfig ModelConfig::preset(SizePreset size) {
  ModelConfig c;
  switch (size) {
    case SizePreset::base: c.depth = 6, c.d_model = 512, c.heads = 8; break;
    case SizePreset::standard: c.depth = 6, c.d_model = 1024, c.heads = 16; break;
    case SizePreset::large: c.depth = 10, c.d_model = 1024, c.heads = 16; break;
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (depth < 1) fail("depth must be >= 1");
  if (d_model < 1) fail("d_model must be >= 1");
  if (heads < 1 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (k_clip < 0) fail("k_clip must be >= 0");
  if (max_positions < 1) fail("max_positions must be >= 1");
  if (vocab != vocab::kSize) fail("vocab must be " + std::to_string(vocab::kSize));
  if (n_out < 1) fail("n_out must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(ln_eps > 0.0)) fail("ln_eps must be > 0");
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

KeyValues ModelConfig::to_kv() const {
  return {
      {"model.depth", std::to_string(depth)},
      {"model.d_model", std::to_string(d_model)},
      {"model.heads", std::to_string(heads)},
      {"model.ffn_mult", std::to_string(ffn_mult)},
      {"model.pe", std::string(to_string(pe))},
      {"model.shared_layers", shared_layers ? "true" : "false"},
      {"model.share_relative_tables", share_relative_tables ? "true" : "false"},
      {"model.k_clip", std::to_string(k_clip)},
      {"model.max_positions", std::to_string(max_positions)},
      {"model.vocab", std::to_string(vocab)},
      {"model.n_out", std::to_string(n_out)},
      {"model.dropout", fmt_double(dropout)},
      {"model.ln_eps", fmt_double(ln_eps)},
  };
}

ModelConfig ModelConfig::from_kv(const KeyValues& kv) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument("model config: missing key " + key);
    return it->second;
  };
  auto to_bool = [](const std::string& v) { return v == "true" || v == "1"; };
  ModelConfig c;
  c.depth = std::stoi(get("model.depth"));
  c.d_model = std::stoi(get("model.d_model"));
  c.heads = std::stoi(get("model.heads"));
  c.ffn_mult = std::stoi(get("model.ffn_mult"));
  c.pe = parse_pe_kind(get("model.pe"));
  c.shared_layers = to_bool(get("model.shared_layers"));
  c.share_relative_tables = to_bool(get("model.share_relative_tables"));
  c.k_clip = std::stoi(get("model.k_clip"));
  c.max_positions = std::stoi(get("model.max_positions"));
  c.vocab = std::stoi(get("model.vocab"));
  c.n_out = std::stoi(get("model.n_out"));
  c.dropout = std::stod(get("model.dropout"));
  c.ln_eps = std::stod(get("model.ln_eps"));
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t V = static_cast<std::size_t>(c.vocab);
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t f = static_cast<std::size_t>(c.d_ffn());
  const std::size_t S = c.shared_layers ? 1 : static_cast<std::size_t>(c.depth);
  const std::size_t R = c.pe == PeKind::ape ? 0 : (c.pe == PeKind::rpe_k ? 1 : 2);
  const std::size_t t = static_cast<std::size_t>(2 * c.k_clip + 1) *
                        static_cast<std::size_t>(c.d_head());
  std::size_t n = V * d + 2 * d;
  if (c.pe == PeKind::ape) n += static_cast<std::size_t>(c.max_positions) * d;
  n += S * (4 * (d * d + d) + 2 * d * f + f + d + 4 * d);
  n += R * t * (c.share_relative_tables ? 1 : S);
  n += d * V + V;
  return n;
}

template <typename T>
void Model<T>::build_layout() {
  params_.clear();
  layers_.clear();
  pos_.reset();
  const auto& c = config_;
  const std::size_t V = static_cast<std::size_t>(c.vocab);
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t f = static_cast<std::size_t>(c.d_ffn());
  const std::size_t dh = static_cast<std::size_t>(c.d_head());
  const std::size_t rel_rows = static_cast<std::size_t>(2 * c.k_clip + 1);
  auto add = [&](std::string name, Shape shape, bool decay) {
    params_.push_back({std::move(name), Tensor<T>(std::move(shape), true), decay});
    return params_.size() - 1;
  };
  tok_ = add("embed.token", {V, d}, true);
  if (c.pe == PeKind::ape) {
    pos_ = add("embed.position", {static_cast<std::size_t>(c.max_positions), d}, false);
  }
  embed_ln_g_ = add("embed.ln.gamma", {d}, false);
  embed_ln_b_ = add("embed.ln.beta", {d}, false);

  std::optional<std::size_t> shared_rk, shared_rq;
  if (c.share_relative_tables && c.pe != PeKind::ape) {
    shared_rk = add("rel.k", {rel_rows, dh}, false);
    if (c.pe == PeKind::rpe_kq) shared_rq = add("rel.q", {rel_rows, dh}, false);
  }
  const int stacked = c.shared_layers ? 1 : c.depth;
  for (int l = 0; l < stacked; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerIndex li{};
    li.wq = add(p + "attn.wq", {d, d}, true);
    li.bq = add(p + "attn.bq", {d}, false);
    li.wk = add(p + "attn.wk", {d, d}, true);
    li.bk = add(p + "attn.bk", {d}, false);
    li.wv = add(p + "attn.wv", {d, d}, true);
    li.bv = add(p + "attn.bv", {d}, false);
    li.wo = add(p + "attn.wo", {d, d}, true);
    li.bo = add(p + "attn.bo", {d}, false);
    if (c.pe != PeKind::ape) {
      if (c.share_relative_tables) {
        li.rel_k = shared_rk;
        li.rel_q = shared_rq;
      } else {
        li.rel_k = add(p + "attn.rel_k", {rel_rows, dh}, false);
        if (c.pe == PeKind::rpe_kq) li.rel_q = add(p + "attn.rel_q", {rel_rows, dh}, false);
      }
    }
    li.ln1_g = add(p + "ln1.gamma", {d}, false);
    li.ln1_b = add(p + "ln1.beta", {d}, false);
    li.w1 = add(p + "ffn.w1", {d, f}, true);
    li.b1 = add(p + "ffn.b1", {f}, false);
    li.w2 = add(p + "ffn.w2", {f, d}, true);
    li.b2 = add(p + "ffn.b2", {d}, false);
    li.ln2_g = add(p + "ln2.gamma", {d}, false);
    li.ln2_b = add(p + "ln2.beta", {d}, false);
    layers_.push_back(li);
  }
  cls_w_ = add("classifier.w", {d, V}, true);
  cls_b_ = add("classifier.b", {V}, false);
}

namespace {

bool is_bias(const std::string& name) {
  auto dot = name.rfind('.');
  std::string_view leaf = std::string_view(name).substr(dot + 1);
  return leaf == "beta" || (leaf.size() == 2 && leaf[0] == 'b');
}

}  // namespace

template <typename T>
Model<T> Model<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.build_layout();
  Rng rng = derive_rng(seed, 0x696e6974);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& p : m.params_) {
    auto& data = p.tensor.data;
    const std::string& n = p.name;
    if (n.ends_with(".gamma")) {
      std::fill(data.begin(), data.end(), T{1});
    } else if (is_bias(n)) {
      std::fill(data.begin(), data.end(), T{0});
    } else {
      for (auto& v : data) v = static_cast<T>(normal(rng));
    }
  }
  return m;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
NamedParam<T>& Model<T>::param(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

template <typename T>
const NamedParam<T>& Model<T>::param(std::string_view name) const {
  return const_cast<Model*>(this)->param(name);
}

template <typename T>
typename Graph<T>::Var Model<T>::forward(Graph<T>& g, std::span<const TokenId> ids,
                                         std::size_t batch, std::size_t seq,
                                         const ForwardOptions<T>& opts) {
  using Var = typename Graph<T>::Var;
  const auto& c = config_;
  if (ids.size() != batch * seq) {
    throw ShapeError("forward: " + std::to_string(ids.size()) + " ids for batch " +
                     std::to_string(batch) + " x seq " + std::to_string(seq));
  }
  if (seq < static_cast<std::size_t>(c.n_out)) {
    throw ShapeError("forward: sequence length " + std::to_string(seq) +
                     " shorter than n_out " + std::to_string(c.n_out));
  }
  if (c.pe == PeKind::ape && seq > static_cast<std::size_t>(c.max_positions)) {
    throw ShapeError("forward: sequence length " + std::to_string(seq) +
                     " exceeds max_positions " + std::to_string(c.max_positions));
  }
  std::vector<Var> pv;
  pv.reserve(params_.size());
  for (auto& p : params_) pv.push_back(g.param(p.tensor));

  const T drop = opts.training ? static_cast<T>(c.dropout) : T{0};
  auto dropout = [&](Var v) {
    if (drop <= T{0}) return v;
    if (!opts.dropout_rng) throw std::invalid_argument("forward: dropout needs an rng");
    return g.dropout(v, drop, *opts.dropout_rng);
  };
  const T eps = static_cast<T>(c.ln_eps);
  auto norm = [&](Var v, std::size_t gi, std::size_t bi) {
    Var out = g.layer_norm(v, pv[gi], pv[bi], eps);
    if (opts.capture_norms) opts.capture_norms->push_back(g.value(out));
    return out;
  };

  Var x = g.embed_gather(pv[tok_], ids);
  if (pos_) {
    std::vector<TokenId> positions(ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
      positions[i] = static_cast<TokenId>(i % seq);
    }
    x = g.add(x, g.embed_gather(pv[*pos_], positions));
  }
  x = dropout(norm(x, embed_ln_g_, embed_ln_b_));

  const AttentionGeometry geo{batch, seq, static_cast<std::size_t>(c.heads), c.k_clip};
  for (int l = 0; l < c.depth; ++l) {
    const LayerIndex& li = layers_[c.shared_layers ? 0 : static_cast<std::size_t>(l)];
    Var q = g.linear(x, pv[li.wq], pv[li.bq]);
    Var k = g.linear(x, pv[li.wk], pv[li.bk]);
    Var v = g.linear(x, pv[li.wv], pv[li.bv]);
    std::optional<Var> rk, rq;
    if (li.rel_k) rk = pv[*li.rel_k];
    if (li.rel_q) rq = pv[*li.rel_q];
    Var scores = g.relative_scores(q, k, rk, rq, geo);
    if (opts.capture_scores) opts.capture_scores->push_back(g.value(scores));
    Var probs = dropout(g.softmax(scores));
    Var attn = dropout(g.linear(g.attend(probs, v, geo), pv[li.wo], pv[li.bo]));
    x = norm(g.add(x, attn), li.ln1_g, li.ln1_b);
    Var hidden = g.gelu(g.linear(x, pv[li.w1], pv[li.b1]));
    Var ffn = dropout(g.linear(hidden, pv[li.w2], pv[li.b2]));
    x = norm(g.add(x, ffn), li.ln2_g, li.ln2_b);
  }
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  Var seqs = g.reshape(x, {batch, seq, d});
  Var head = g.slice(seqs, 1, 0, static_cast<std::size_t>(c.n_out));
  return g.linear(head, pv[cls_w_], pv[cls_b_]);
}

template <typename T>
Tensor<T> Model<T>::logits(std::span<const TokenId> ids, std::size_t batch,
                           std::size_t seq) const {
  Graph<T> g(/*track_grad=*/false);
  // forward() only reads parameters on a non-tracking graph.
  auto out = const_cast<Model*>(this)->forward(g, ids, batch, seq);
  return g.value(out);
}

template <typename T>
std::vector<TokenId> argmax_rows(const Tensor<T>& logits) {
  if (logits.shape.empty()) throw ShapeError("argmax_rows: scalar input");
  const std::size_t V = logits.shape.back();
  const std::size_t rows = logits.size() / V;
  std::vector<TokenId> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.data.data() + r * V;
    // max_element returns the first maximum, i.e. the lowest id on ties.
    out[r] = static_cast<TokenId>(std::max_element(row, row + V) - row);
  }
  return out;
}

template <typename T>
std::vector<TokenId> Model<T>::predict(std::span<const TokenId> ids, std::size_t batch,
                                       std::size_t seq) const {
  return argmax_rows(logits(ids, batch, seq));
}

template <typename T>
std::uint64_t Model<T>::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    for (char ch : p.name) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor.data.data());
    for (std::size_t i = 0; i < p.tensor.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class Model<float>;
template class Model<double>;
template std::vector<TokenId> argmax_rows(const Tensor<float>&);
template std::vector<TokenId> argmax_rows(const Tensor<double>&);

}  // namespace lengen
