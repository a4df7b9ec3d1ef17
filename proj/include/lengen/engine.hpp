#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lengen {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised before any compute when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor with an optional gradient buffer of the same shape.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass writes into it
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, bool requires_grad_ = false)
      : shape(std::move(s)), data(numel(shape), T{0}), requires_grad(requires_grad_) {}
  Tensor(Shape s, std::vector<T> values, bool requires_grad_ = false);

  std::size_t size() const { return data.size(); }
  void zero_grad() { grad.assign(data.size(), T{0}); }
};

/// C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          T alpha, const T* a, const T* b, T beta, T* c);

/// Geometry of multi-head self-attention over a [batch * seq, d_model] slab.
struct AttentionGeometry {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  int k_clip = 16;
};

/// Index into a relative-offset table for the pair (query i, key j):
/// clip(j - i, -k_clip, k_clip) + k_clip.
inline std::size_t relative_index(std::size_t i, std::size_t j, int k_clip) {
  long off = static_cast<long>(j) - static_cast<long>(i);
  if (off < -k_clip) off = -k_clip;
  if (off > k_clip) off = k_clip;
  return static_cast<std::size_t>(off + k_clip);
}

/// Recording tape for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order;
/// backward() walks it once in reverse. Leaves bound with param() share the
/// caller's tensor, and their gradients accumulate into its grad buffer.
template <typename T>
class Graph {
 public:
  struct Var {
    std::size_t id = 0;
  };

  /// A graph built with track_grad = false records no backward closures.
  explicit Graph(bool track_grad = true) : track_grad_(track_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value);
  Var param(Tensor<T>& external);
  /// Read-only leaf; only valid on a graph that does not track gradients.
  Var param(const Tensor<T>& external);

  const Tensor<T>& value(Var v) const { return node(v).t(); }
  const Shape& shape(Var v) const { return value(v).shape; }
  /// Gradient of the loss w.r.t. v after backward(); empty if not reached.
  std::span<const T> grad(Var v) const { return node(v).t().grad; }
  std::size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b);
  Var scale(Var a, T s);
  Var sum(Var a);
  Var matmul(Var a, Var b);
  /// x[..., k] * w[k, n] + bias[n]
  Var linear(Var x, Var w, Var bias);
  Var gelu(Var a);
  /// Softmax over the last dimension.
  Var softmax(Var a);
  /// Normalizes over the last dimension, then applies gamma, beta.
  Var layer_norm(Var x, Var gamma, Var beta, T eps);
  /// Rows of table[V, d] selected by ids -> [ids.size(), d].
  Var embed_gather(Var table, std::span<const std::int32_t> ids);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
  Var reshape(Var a, Shape shape);
  /// Inverted dropout; identity when p == 0.
  Var dropout(Var a, T p, std::mt19937_64& rng);

  /// Pre-softmax attention scores [batch, heads, seq, seq] from q, k of
  /// shape [batch * seq, d_model]:
  ///   (q_i.k_j + q_i.rk[r] + k_j.rq[r]) / sqrt(d_head),  r = clip(j - i)
  /// The rk / rq terms are present only when the tables are given; each
  /// table is [2 * k_clip + 1, d_head] and shared by all heads.
  Var relative_scores(Var q, Var k, std::optional<Var> rel_k,
                      std::optional<Var> rel_q, const AttentionGeometry& geo);
  /// probs[batch, heads, seq, seq] applied to v[batch * seq, d_model].
  Var attend(Var probs, Var v, const AttentionGeometry& geo);

  /// Mean over rows of -log softmax(logits)[target]; logits [..., V].
  Var cross_entropy(Var logits, std::span<const std::int32_t> targets);

  /// Throws std::logic_error when called a second time on the same graph.
  void backward(Var loss);

 private:
  struct Node {
    Tensor<T> own;
    Tensor<T>* ext = nullptr;
    bool needs_grad = false;
    std::function<void()> back;
    Tensor<T>& t() { return ext ? *ext : own; }
    const Tensor<T>& t() const { return ext ? *ext : own; }
  };

  Node& node(Var v) { return nodes_.at(v.id); }
  const Node& node(Var v) const { return nodes_.at(v.id); }
  Var push(Tensor<T> value, bool needs_grad);
  std::span<T> gbuf(std::size_t id);
  bool needs(Var v) const { return node(v).needs_grad; }

  std::deque<Node> nodes_;
  bool track_grad_ = true;
  bool backward_done_ = false;
};

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace lengen
