#include "lengen/engine.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

namespace lengen {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values, bool requires_grad_)
    : shape(std::move(s)), data(std::move(values)), requires_grad(requires_grad_) {
  if (data.size() != numel(shape)) {
    throw ShapeError("Tensor: " + std::to_string(data.size()) +
                     " values for shape " + shape_str(shape));
  }
}

template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
  if (m == 0 || n == 0) return;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n),
             K = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> C(c, M, N);
  if (beta == T{0}) {
    C.setZero();
  } else if (beta != T{1}) {
    C *= beta;
  }
  // A row-major [K, M] buffer is a column-major [M, K] view of op(A) = A^T.
  if (!ta && !tb) {
    C.noalias() += alpha * Eigen::Map<const Mat>(a, M, K) * Eigen::Map<const Mat>(b, K, N);
  } else if (!ta && tb) {
    C.noalias() += alpha * Eigen::Map<const Mat>(a, M, K) * Eigen::Map<const MatT>(b, K, N);
  } else if (ta && !tb) {
    C.noalias() += alpha * Eigen::Map<const MatT>(a, M, K) * Eigen::Map<const Mat>(b, K, N);
  } else {
    C.noalias() += alpha * Eigen::Map<const MatT>(a, M, K) * Eigen::Map<const MatT>(b, K, N);
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, float,
                          const float*, const float*, float, float*);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, double,
                           const double*, const double*, double, double*);

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s{0};
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

template <typename T>
typename Graph<T>::Var Graph<T>::push(Tensor<T> value, bool needs_grad) {
  Node n;
  n.own = std::move(value);
  n.needs_grad = track_grad_ && needs_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
std::span<T> Graph<T>::gbuf(std::size_t id) {
  auto& t = nodes_[id].t();
  if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), T{0});
  return t.grad;
}

template <typename T>
typename Graph<T>::Var Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <typename T>
typename Graph<T>::Var Graph<T>::param(Tensor<T>& external) {
  Node n;
  n.ext = &external;
  n.needs_grad = track_grad_ && external.requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
typename Graph<T>::Var Graph<T>::param(const Tensor<T>& external) {
  if (track_grad_) {
    throw std::logic_error("Graph::param: const leaf on a gradient-tracking graph");
  }
  Node n;
  n.ext = const_cast<Tensor<T>*>(&external);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
typename Graph<T>::Var Graph<T>::add(Var a, Var b) {
  require(shape(a) == shape(b), "add: shapes " + shape_str(shape(a)) + " and " +
                                    shape_str(shape(b)) + " differ");
  Tensor<T> out(shape(a));
  const auto& x = value(a).data;
  const auto& y = value(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x[i] + y[i];
  Var r = push(std::move(out), needs(a) || needs(b));
  if (node(r).needs_grad) {
    node(r).back = [this, a, b, r] {
      auto g = gbuf(r.id);
      for (Var in : {a, b}) {
        if (!needs(in)) continue;
        auto gi = gbuf(in.id);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::scale(Var a, T s) {
  Tensor<T> out(shape(a));
  const auto& x = value(a).data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = s * x[i];
  Var r = push(std::move(out), needs(a));
  if (needs(a)) {
    node(r).back = [this, a, r, s] {
      auto g = gbuf(r.id);
      auto ga = gbuf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::sum(Var a) {
  const auto& x = value(a).data;
  T s{0};
  for (T v : x) s += v;
  Var r = push(Tensor<T>({1}, std::vector<T>{s}), needs(a));
  if (needs(a)) {
    node(r).back = [this, a, r] {
      T g = gbuf(r.id)[0];
      for (auto& v : gbuf(a.id)) v += g;
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul: incompatible " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out({m, n});
  gemm<T>(false, false, m, n, k, T{1}, value(a).data.data(), value(b).data.data(),
          T{0}, out.data.data());
  Var r = push(std::move(out), needs(a) || needs(b));
  if (node(r).needs_grad) {
    node(r).back = [this, a, b, r, m, n, k] {
      const T* g = gbuf(r.id).data();
      if (needs(a)) {
        gemm<T>(false, true, m, k, n, T{1}, g, value(b).data.data(), T{1},
                gbuf(a.id).data());
      }
      if (needs(b)) {
        gemm<T>(true, false, k, n, m, T{1}, value(a).data.data(), g, T{1},
                gbuf(b.id).data());
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::linear(Var x, Var w, Var bias) {
  const Shape& sx = shape(x);
  const Shape& sw = shape(w);
  require(!sx.empty() && sw.size() == 2 && sx.back() == sw[0],
          "linear: input " + shape_str(sx) + " vs weight " + shape_str(sw));
  require(shape(bias) == Shape{sw[1]},
          "linear: bias " + shape_str(shape(bias)) + " vs weight " + shape_str(sw));
  const std::size_t k = sw[0], n = sw[1];
  const std::size_t m = numel(sx) / k;
  Shape so = sx;
  so.back() = n;
  Tensor<T> out(so);
  const auto& bv = value(bias).data;
  for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.data.begin() + i * n);
  gemm<T>(false, false, m, n, k, T{1}, value(x).data.data(), value(w).data.data(),
          T{1}, out.data.data());
  Var r = push(std::move(out), needs(x) || needs(w) || needs(bias));
  if (node(r).needs_grad) {
    node(r).back = [this, x, w, bias, r, m, n, k] {
      const T* g = gbuf(r.id).data();
      if (needs(x)) {
        gemm<T>(false, true, m, k, n, T{1}, g, value(w).data.data(), T{1},
                gbuf(x.id).data());
      }
      if (needs(w)) {
        gemm<T>(true, false, k, n, m, T{1}, value(x).data.data(), g, T{1},
                gbuf(w.id).data());
      }
      if (needs(bias)) {
        auto gb = gbuf(bias.id);
        for (std::size_t i = 0; i < m; ++i) axpy(T{1}, g + i * n, gb.data(), n);
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::gelu(Var a) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto& xv = value(a).data;
  const auto n = static_cast<Eigen::Index>(xv.size());
  const T inv_sqrt2 = T{1} / std::sqrt(T{2});
  Eigen::Map<const Arr> x(xv.data(), n);
  // Phi(x), kept for the backward pass.
  auto cdf = std::make_shared<std::vector<T>>(xv.size());
  Eigen::Map<Arr> c(cdf->data(), n);
  c = T{0.5} * (T{1} + (x * inv_sqrt2).erf());
  Tensor<T> out(shape(a));
  Eigen::Map<Arr>(out.data.data(), n) = x * c;
  Var r = push(std::move(out), needs(a));
  if (needs(a)) {
    node(r).back = [this, a, r, cdf, n] {
      const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * T{3.14159265358979323846});
      Eigen::Map<const Arr> x(value(a).data.data(), n);
      Eigen::Map<const Arr> c(cdf->data(), n);
      Eigen::Map<const Arr> g(gbuf(r.id).data(), n);
      Eigen::Map<Arr> ga(gbuf(a.id).data(), n);
      ga += g * (c + x * inv_sqrt_2pi * (T{-0.5} * x * x).exp());
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::softmax(Var a) {
  const Shape& s = shape(a);
  require(!s.empty() && s.back() > 0, "softmax: empty last dimension");
  const std::size_t n = s.back();
  const std::size_t rows = numel(s) / n;
  Tensor<T> out(s);
  const auto& x = value(a).data;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * n;
    T* yr = out.data.data() + r * n;
    T mx = *std::max_element(xr, xr + n);
    T z{0};
    for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }
  Var r = push(std::move(out), needs(a));
  if (needs(a)) {
    node(r).back = [this, a, r, rows, n] {
      const auto& y = value(r).data;
      auto g = gbuf(r.id);
      auto ga = gbuf(a.id);
      for (std::size_t i = 0; i < rows; ++i) {
        const T* yr = y.data() + i * n;
        const T* gr = g.data() + i * n;
        T d = dot(yr, gr, n);
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += yr[j] * (gr[j] - d);
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
  const Shape& s = shape(x);
  require(!s.empty(), "layer_norm: scalar input");
  const std::size_t n = s.back();
  require(shape(gamma) == Shape{n} && shape(beta) == Shape{n},
          "layer_norm: affine parameters must be [" + std::to_string(n) + "]");
  const std::size_t rows = numel(s) / n;
  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(numel(s));
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const auto& xv = value(x).data;
  const auto& gv = value(gamma).data;
  const auto& bv = value(beta).data;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(n);
    T rs = T{1} / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      T h = (xr[j] - mean) * rs;
      (*xhat)[r * n + j] = h;
      out.data[r * n + j] = h * gv[j] + bv[j];
    }
  }
  Var r = push(std::move(out), needs(x) || needs(gamma) || needs(beta));
  if (node(r).needs_grad) {
    node(r).back = [this, x, gamma, beta, r, rows, n, xhat, rstd] {
      auto g = gbuf(r.id);
      const auto& gv = value(gamma).data;
      if (needs(gamma) || needs(beta)) {
        std::span<T> gg = needs(gamma) ? gbuf(gamma.id) : std::span<T>{};
        std::span<T> gb = needs(beta) ? gbuf(beta.id) : std::span<T>{};
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            if (!gg.empty()) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
            if (!gb.empty()) gb[j] += g[i * n + j];
          }
        }
      }
      if (needs(x)) {
        auto gx = gbuf(x.id);
        std::vector<T> dh(n);
        for (std::size_t i = 0; i < rows; ++i) {
          const T* hr = xhat->data() + i * n;
          T mean_dh{0}, mean_dh_h{0};
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = g[i * n + j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * hr[j];
          }
          mean_dh /= static_cast<T>(n);
          mean_dh_h /= static_cast<T>(n);
          for (std::size_t j = 0; j < n; ++j) {
            gx[i * n + j] += (*rstd)[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::embed_gather(Var table,
                                              std::span<const std::int32_t> ids) {
  const Shape& s = shape(table);
  require(s.size() == 2, "embed_gather: table must be 2-D, got " + shape_str(s));
  const std::size_t rows = s[0], d = s[1];
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("embed_gather: id " + std::to_string(id) +
                              " outside table of " + std::to_string(rows) + " rows");
    }
  }
  Tensor<T> out({ids.size(), d});
  const auto& tv = value(table).data;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Var r = push(std::move(out), needs(table));
  if (needs(table)) {
    node(r).back = [this, table, r, d, idv = std::vector<std::int32_t>(ids.begin(), ids.end())] {
      auto g = gbuf(r.id);
      auto gt = gbuf(table.id);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        axpy(T{1}, g.data() + i * d, gt.data() + static_cast<std::size_t>(idv[i]) * d, d);
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::concat(std::span<const Var> parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = shape(parts[0]);
  require(axis < s0.size(), "concat: axis out of range");
  Shape so = s0;
  so[axis] = 0;
  bool any = false;
  for (Var p : parts) {
    const Shape& sp = shape(p);
    require(sp.size() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < sp.size(); ++i) {
      require(i == axis || sp[i] == s0[i],
              "concat: " + shape_str(sp) + " vs " + shape_str(s0));
    }
    so[axis] += sp[axis];
    any |= needs(p);
  }
  Tensor<T> out(so);
  auto osplit = split_at(so, axis);
  std::size_t offset = 0;
  for (Var p : parts) {
    auto ps = split_at(shape(p), axis);
    const auto& pv = value(p).data;
    const std::size_t chunk = ps.extent * ps.inner;
    for (std::size_t o = 0; o < ps.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.data.begin() +
                      static_cast<std::ptrdiff_t>(o * osplit.extent * osplit.inner + offset * osplit.inner));
    }
    offset += ps.extent;
  }
  Var r = push(std::move(out), any);
  if (any) {
    std::vector<Var> ps(parts.begin(), parts.end());
    node(r).back = [this, ps, r, axis] {
      auto g = gbuf(r.id);
      auto os = split_at(shape(r), axis);
      std::size_t offset = 0;
      for (Var p : ps) {
        auto sp = split_at(shape(p), axis);
        if (needs(p)) {
          auto gp = gbuf(p.id);
          const std::size_t chunk = sp.extent * sp.inner;
          for (std::size_t o = 0; o < sp.outer; ++o) {
            axpy(T{1}, g.data() + o * os.extent * os.inner + offset * os.inner,
                 gp.data() + o * chunk, chunk);
          }
        }
        offset += sp.extent;
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::slice(Var a, std::size_t axis, std::size_t begin,
                                       std::size_t end) {
  const Shape& s = shape(a);
  require(axis < s.size() && begin <= end && end <= s[axis],
          "slice: [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  Shape so = s;
  so[axis] = end - begin;
  Tensor<T> out(so);
  auto sp = split_at(s, axis);
  const std::size_t chunk = (end - begin) * sp.inner;
  const auto& av = value(a).data;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * sp.extent * sp.inner + begin * sp.inner),
                chunk, out.data.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  Var r = push(std::move(out), needs(a));
  if (needs(a)) {
    node(r).back = [this, a, r, sp, begin, chunk] {
      auto g = gbuf(r.id);
      auto ga = gbuf(a.id);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        axpy(T{1}, g.data() + o * chunk,
             ga.data() + o * sp.extent * sp.inner + begin * sp.inner, chunk);
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::reshape(Var a, Shape s) {
  require(numel(s) == numel(shape(a)),
          "reshape: " + shape_str(shape(a)) + " -> " + shape_str(s));
  Tensor<T> out(std::move(s), value(a).data);
  Var r = push(std::move(out), needs(a));
  if (needs(a)) {
    node(r).back = [this, a, r] {
      auto g = gbuf(r.id);
      auto ga = gbuf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::dropout(Var a, T p, std::mt19937_64& rng) {
  if (p <= T{0}) return a;
  if (p >= T{1}) throw std::invalid_argument("dropout: p must be < 1");
  const auto& x = value(a).data;
  auto mask = std::make_shared<std::vector<T>>(x.size());
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T inv = T{1} / (T{1} - p);
  Tensor<T> out(shape(a));
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*mask)[i] = keep(rng) ? inv : T{0};
    out.data[i] = x[i] * (*mask)[i];
  }
  Var r = push(std::move(out), needs(a));
  if (needs(a)) {
    node(r).back = [this, a, r, mask] {
      auto g = gbuf(r.id);
      auto ga = gbuf(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::relative_scores(Var q, Var k, std::optional<Var> rel_k,
                                                 std::optional<Var> rel_q,
                                                 const AttentionGeometry& geo) {
  const std::size_t B = geo.batch, L = geo.seq, H = geo.heads;
  const Shape& sq = shape(q);
  require(sq.size() == 2 && sq[0] == B * L && H > 0 && sq[1] % H == 0,
          "relative_scores: q " + shape_str(sq) + " vs batch*seq=" +
              std::to_string(B * L) + ", heads=" + std::to_string(H));
  require(shape(k) == sq, "relative_scores: k " + shape_str(shape(k)) + " vs q " + shape_str(sq));
  const std::size_t d = sq[1], dh = d / H;
  const std::size_t table_rows = static_cast<std::size_t>(2 * geo.k_clip + 1);
  for (auto t : {rel_k, rel_q}) {
    if (t) {
      require(shape(*t) == Shape{table_rows, dh},
              "relative_scores: table " + shape_str(shape(*t)) + ", expected [" +
                  std::to_string(table_rows) + ", " + std::to_string(dh) + "]");
    }
  }
  const T scl = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> out({B, H, L, L});
  const T* qv = value(q).data.data();
  const T* kv = value(k).data.data();
  const T* rk = rel_k ? value(*rel_k).data.data() : nullptr;
  const T* rq = rel_q ? value(*rel_q).data.data() : nullptr;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        const T* qi = qv + (b * L + i) * d + h * dh;
        T* row = out.data.data() + ((b * H + h) * L + i) * L;
        for (std::size_t j = 0; j < L; ++j) {
          const T* kj = kv + (b * L + j) * d + h * dh;
          T s = dot(qi, kj, dh);
          const std::size_t ri = relative_index(i, j, geo.k_clip);
          if (rk) s += dot(qi, rk + ri * dh, dh);
          if (rq) s += dot(kj, rq + ri * dh, dh);
          row[j] = s * scl;
        }
      }
    }
  }
  bool any = needs(q) || needs(k) || (rel_k && needs(*rel_k)) || (rel_q && needs(*rel_q));
  Var r = push(std::move(out), any);
  if (any) {
    node(r).back = [this, q, k, rel_k, rel_q, r, B, L, H, d, dh, scl, kc = geo.k_clip] {
      const T* g = gbuf(r.id).data();
      const T* qv = value(q).data.data();
      const T* kv = value(k).data.data();
      const T* rk = rel_k ? value(*rel_k).data.data() : nullptr;
      const T* rq = rel_q ? value(*rel_q).data.data() : nullptr;
      T* gq = needs(q) ? gbuf(q.id).data() : nullptr;
      T* gk = needs(k) ? gbuf(k.id).data() : nullptr;
      T* grk = (rel_k && needs(*rel_k)) ? gbuf(rel_k->id).data() : nullptr;
      T* grq = (rel_q && needs(*rel_q)) ? gbuf(rel_q->id).data() : nullptr;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < L; ++i) {
            const std::size_t qo = (b * L + i) * d + h * dh;
            const T* grow = g + ((b * H + h) * L + i) * L;
            for (std::size_t j = 0; j < L; ++j) {
              const T ds = grow[j] * scl;
              if (ds == T{0}) continue;
              const std::size_t ko = (b * L + j) * d + h * dh;
              const std::size_t ri = relative_index(i, j, kc) * dh;
              if (gq) {
                axpy(ds, kv + ko, gq + qo, dh);
                if (rk) axpy(ds, rk + ri, gq + qo, dh);
              }
              if (gk) {
                axpy(ds, qv + qo, gk + ko, dh);
                if (rq) axpy(ds, rq + ri, gk + ko, dh);
              }
              if (grk) axpy(ds, qv + qo, grk + ri, dh);
              if (grq) axpy(ds, kv + ko, grq + ri, dh);
            }
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::attend(Var probs, Var v, const AttentionGeometry& geo) {
  const std::size_t B = geo.batch, L = geo.seq, H = geo.heads;
  require(shape(probs) == Shape{B, H, L, L},
          "attend: probs " + shape_str(shape(probs)));
  const Shape& sv = shape(v);
  require(sv.size() == 2 && sv[0] == B * L && sv[1] % H == 0,
          "attend: v " + shape_str(sv));
  const std::size_t d = sv[1], dh = d / H;
  Tensor<T> out({B * L, d});
  const T* pv = value(probs).data.data();
  const T* vv = value(v).data.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        const T* prow = pv + ((b * H + h) * L + i) * L;
        T* o = out.data.data() + (b * L + i) * d + h * dh;
        for (std::size_t j = 0; j < L; ++j) axpy(prow[j], vv + (b * L + j) * d + h * dh, o, dh);
      }
    }
  }
  Var r = push(std::move(out), needs(probs) || needs(v));
  if (node(r).needs_grad) {
    node(r).back = [this, probs, v, r, B, L, H, d, dh] {
      const T* g = gbuf(r.id).data();
      const T* pv = value(probs).data.data();
      const T* vv = value(v).data.data();
      T* gp = needs(probs) ? gbuf(probs.id).data() : nullptr;
      T* gv = needs(v) ? gbuf(v.id).data() : nullptr;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < L; ++i) {
            const std::size_t prow = ((b * H + h) * L + i) * L;
            const T* gi = g + (b * L + i) * d + h * dh;
            for (std::size_t j = 0; j < L; ++j) {
              const std::size_t vo = (b * L + j) * d + h * dh;
              if (gp) gp[prow + j] += dot(gi, vv + vo, dh);
              if (gv) axpy(pv[prow + j], gi, gv + vo, dh);
            }
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
typename Graph<T>::Var Graph<T>::cross_entropy(Var logits,
                                               std::span<const std::int32_t> targets) {
  const Shape& s = shape(logits);
  require(!s.empty() && s.back() > 0, "cross_entropy: empty class dimension");
  const std::size_t V = s.back();
  const std::size_t rows = numel(s) / V;
  require(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(rows) + " rows");
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) +
                              " outside [0, " + std::to_string(V) + ")");
    }
  }
  const auto& x = value(logits).data;
  auto probs = std::make_shared<std::vector<T>>(x.size());
  T loss{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * V;
    T* pr = probs->data() + r * V;
    T mx = *std::max_element(xr, xr + V);
    T z{0};
    for (std::size_t j = 0; j < V; ++j) z += (pr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < V; ++j) pr[j] /= z;
    loss += std::log(z) + mx - xr[targets[r]];
  }
  loss /= static_cast<T>(rows);
  Var r = push(Tensor<T>({1}, std::vector<T>{loss}), needs(logits));
  if (needs(logits)) {
    node(r).back = [this, logits, r, probs, rows, V,
                    tv = std::vector<std::int32_t>(targets.begin(), targets.end())] {
      const T g = gbuf(r.id)[0] / static_cast<T>(rows);
      auto gl = gbuf(logits.id);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < V; ++j) {
          T p = (*probs)[i * V + j] - (static_cast<std::size_t>(tv[i]) == j ? T{1} : T{0});
          gl[i * V + j] += g * p;
        }
      }
    };
  }
  return r;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (backward_done_) throw std::logic_error("backward: graph was already differentiated");
  require(numel(shape(loss)) == 1, "backward: loss must be a scalar, got " +
                                       shape_str(shape(loss)));
  backward_done_ = true;
  if (!needs(loss)) return;
  gbuf(loss.id)[0] += T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.needs_grad && n.back) n.back();
  }
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace lengen
