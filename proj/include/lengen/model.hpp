#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lengen/engine.hpp"
#include "lengen/task.hpp"

namespace lengen {

enum class PeKind { ape, rpe_k, rpe_kq };
std::string_view to_string(PeKind pe);
PeKind parse_pe_kind(std::string_view text);

enum class SizePreset { base, standard, large };
SizePreset parse_size_preset(std::string_view text);

using KeyValues = std::map<std::string, std::string>;

struct ModelConfig {
  int depth = 6;
  int d_model = 512;
  int heads = 8;
  int ffn_mult = 4;
  PeKind pe = PeKind::rpe_k;
  bool shared_layers = false;
  /// One relative table pair for the whole stack instead of one per layer.
  bool share_relative_tables = false;
  int k_clip = 16;
  int max_positions = 64;
  int vocab = vocab::kSize;
  int n_out = 6;
  double dropout = 0.0;
  double ln_eps = 1e-12;

  /// Base (6, 512, 8), Standard (6, 1024, 16), Large (10, 1024, 16).
  static ModelConfig preset(SizePreset size);

  int d_head() const { return d_model / heads; }
  int d_ffn() const { return d_model * ffn_mult; }
  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  KeyValues to_kv() const;
  static ModelConfig from_kv(const KeyValues& kv);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Closed-form number of trainable scalars. With S stacked parameter sets
/// (1 when shared_layers, else depth), R relative tables per set (0 APE,
/// 1 RPE_k, 2 RPE_kq) of t = (2 k_clip + 1) d_head scalars each, and
/// f = ffn_mult d:
///
///   V d + [APE] P d + 2d
///   + S (4 (d^2 + d) + 2 d f + f + d + 4 d)
///   + R t (S, or 1 when share_relative_tables)
///   + d V + V
std::size_t parameter_count(const ModelConfig& config);

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;  // receives decoupled weight decay
};

template <typename T>
struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
  /// When set, receives each layer's pre-softmax scores [B, h, L, L].
  std::vector<Tensor<T>>* capture_scores = nullptr;
  /// When set, receives every layer-norm output (embedding LN first).
  std::vector<Tensor<T>>* capture_norms = nullptr;
};

/// Encoder-only transformer: embeddings, D encoder layers (optionally one
/// shared layer applied D times) with post-LN residual blocks, and a linear
/// classifier on the first n_out positions.
template <typename T>
class Model {
 public:
  Model() = default;
  /// Weights ~ N(0, 0.02^2), biases 0, layer-norm scale 1.
  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::size_t parameter_count() const;
  NamedParam<T>& param(std::string_view name);
  const NamedParam<T>& param(std::string_view name) const;

  /// Records the forward pass on `g`. ids is [batch * seq]; the result is
  /// logits [batch, n_out, vocab].
  typename Graph<T>::Var forward(Graph<T>& g, std::span<const TokenId> ids,
                                 std::size_t batch, std::size_t seq,
                                 const ForwardOptions<T>& opts = {});

  /// Inference-only logits [batch, n_out, vocab].
  Tensor<T> logits(std::span<const TokenId> ids, std::size_t batch,
                   std::size_t seq) const;
  /// Positionwise argmax of logits, ties to the lowest id: [batch * n_out].
  std::vector<TokenId> predict(std::span<const TokenId> ids, std::size_t batch,
                               std::size_t seq) const;

  /// Order-sensitive 64-bit digest of every parameter value.
  std::uint64_t digest() const;

  void zero_grad();

 private:
  struct LayerIndex {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
    std::optional<std::size_t> rel_k, rel_q;
    std::size_t ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  void build_layout();

  ModelConfig config_;
  std::vector<NamedParam<T>> params_;
  std::size_t tok_ = 0, embed_ln_g_ = 0, embed_ln_b_ = 0, cls_w_ = 0, cls_b_ = 0;
  std::optional<std::size_t> pos_;
  std::vector<LayerIndex> layers_;
};

/// Positionwise argmax with ties broken toward the lowest id.
template <typename T>
std::vector<TokenId> argmax_rows(const Tensor<T>& logits);

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointCorruptError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr int kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  Model<T> model;
  KeyValues metadata;  // everything in the header that is not model config
};

/// Header: magic line, "version N", "dtype f32|f64", key=value lines,
/// "end". Body: tensor count, then per tensor its name, shape and
/// little-endian values.
template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path,
                     const KeyValues& metadata = {});

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Reads only the header (config and metadata) of a checkpoint.
KeyValues read_checkpoint_header(const std::filesystem::path& path);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace lengen
