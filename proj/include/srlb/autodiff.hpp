#pragma once

// Define-by-run reverse-mode differentiation over Tensor values.
//
// A Graph is a tape: every recorded node gets the next id, so id order is a
// topological order. Ops are free functions taking and returning Var handles.
// Gradients flow only into nodes created with Graph::param (and the nodes
// that depend on them); constants never receive gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "srlb/errors.hpp"
#include "srlb/tensor.hpp"

namespace srlb::ad {

enum class Op {
  constant,
  param,
  matmul,
  add,
  sub,
  mul,
  transpose,
  reshape,
  softmax_lastdim,
  layer_norm,
  gelu,
  embedding_lookup,
  slice,
  concat,
  scale,
  mask_fill,
  sum,
  mse,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::constant: return "constant";
    case Op::param: return "param";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::transpose: return "transpose";
    case Op::reshape: return "reshape";
    case Op::softmax_lastdim: return "softmax_lastdim";
    case Op::layer_norm: return "layer_norm";
    case Op::gelu: return "gelu";
    case Op::embedding_lookup: return "embedding_lookup";
    case Op::slice: return "slice";
    case Op::concat: return "concat";
    case Op::scale: return "scale";
    case Op::mask_fill: return "mask_fill";
    case Op::sum: return "sum";
    case Op::mse: return "mse";
  }
  return "unknown";
}

inline constexpr real kLayerNormEps = 1e-5f;

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

// in_grads[k] is null when input k does not need a gradient.
using BackwardFn = std::function<void(const Tensor& out_grad, std::vector<Tensor*>& in_grads)>;

class Graph {
 public:
  struct Node {
    Op kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(Op::constant, {}, std::move(value), false, nullptr); }

  Var param(Tensor value) {
    Var v = push(Op::param, {}, std::move(value), true, nullptr);
    params_.push_back(v.id);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Node& node(Var v) const { return nodes_.at(v.id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::size_t>& param_ids() const noexcept { return params_; }

  // Records an op result. Inputs must already be on this graph.
  Var record(Op kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
    require_finite(value, op_name(kind));
    bool rg = false;
    for (std::size_t id : inputs) {
      if (id >= nodes_.size()) throw ContractError(std::string(op_name(kind)) + ": input is not on this graph");
      rg = rg || nodes_[id].requires_grad;
    }
    return push(kind, std::move(inputs), std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  // Reverse sweep from a scalar loss. Returns one gradient per param node,
  // in creation order. Gradients of any node stay readable through grad().
  std::vector<Tensor> backward(Var loss) {
    const Node& ln = nodes_.at(loss.id);
    if (ln.value.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(ln.value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss.id] = Tensor(ln.value.shape(), 1.0f);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || grads_[i].empty() || !n.backward) continue;
      std::vector<Tensor*> in(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        std::size_t src = n.inputs[k];
        if (!nodes_[src].requires_grad) continue;
        if (grads_[src].empty()) grads_[src] = Tensor::zeros(nodes_[src].value.shape());
        in[k] = &grads_[src];
      }
      n.backward(grads_[i], in);
    }
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (std::size_t id : params_) {
      out.push_back(grads_[id].empty() ? Tensor::zeros(nodes_[id].value.shape()) : grads_[id]);
    }
    return out;
  }

  // Gradient of the last backward() loss w.r.t. node v (zeros if unreached).
  Tensor grad(Var v) const {
    if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
    return Tensor::zeros(nodes_.at(v.id).value.shape());
  }

 private:
  Var push(Op kind, std::vector<std::size_t> inputs, Tensor value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), rg, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::size_t> params_;
  std::vector<Tensor> grads_;
};

namespace detail {

inline Graph& same_graph(std::initializer_list<Var> vs) {
  Graph* g = vs.begin()->graph;
  for (const Var& v : vs) {
    if (v.graph != g || g == nullptr) throw ContractError("autodiff: operands live on different graphs");
  }
  return *g;
}

[[noreturn]] inline void shape_fail(Op op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

// C[M,N] (+)= A[M,K] * B[K,N]
inline void gemm_nn(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    real* crow = c + i * n;
    const real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = arow[p];
      const real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]
inline void gemm_tn(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const real* arow = a + i * k;
    const real* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const real av = arow[p];
      real* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<real> transpose2d(const real* src, std::size_t rows, std::size_t cols) {
  std::vector<real> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
inline void gemm_nt(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<real> bt = transpose2d(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

// True when `tail` equals the trailing dims of `full`.
inline bool is_trailing(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

inline std::size_t normalize_axis(int axis, std::size_t rank, Op op) {
  int r = static_cast<int>(rank);
  int k = axis < 0 ? r + axis : axis;
  if (k < 0 || k >= r) throw DimensionError(std::string(op_name(op)) + ": axis out of range");
  return static_cast<std::size_t>(k);
}

inline real gelu_tanh(real x) {
  constexpr real c = 0.7978845608028654f;  // sqrt(2/pi)
  real u = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

inline real gelu_tanh_grad(real x) {
  constexpr real c = 0.7978845608028654f;
  real x2 = x * x;
  real u = c * (x + 0.044715f * x2 * x);
  real t = std::tanh(u);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * c * (1.0f + 3.0f * 0.044715f * x2);
}

}  // namespace detail

// a[..., M, K] x b[K, N] -> [..., M, N], or batched a[B..., M, K] x b[B..., K, N].
inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.rank() < 2 || B.rank() < 2) detail::shape_fail(Op::matmul, A.shape(), B.shape());
  const std::size_t m = A.dim(-2), k = A.dim(-1);
  const std::size_t n = B.dim(-1);
  if (B.dim(-2) != k) detail::shape_fail(Op::matmul, A.shape(), B.shape());

  Shape out_shape(A.shape().begin(), A.shape().end() - 1);
  out_shape.push_back(n);

  if (B.rank() == 2) {
    const std::size_t rows = A.numel() / k;
    Tensor C(out_shape);
    detail::gemm_nn(A.ptr(), B.ptr(), C.ptr(), rows, k, n);
    Graph* gp = &g;
    std::size_t ia = a.id, ib = b.id;
    return g.record(Op::matmul, {ia, ib}, std::move(C),
                    [gp, ia, ib, rows, k, n](const Tensor& go, std::vector<Tensor*>& gi) {
                      const Tensor& Av = gp->value(Var{gp, ia});
                      const Tensor& Bv = gp->value(Var{gp, ib});
                      if (gi[0]) detail::gemm_nt(go.ptr(), Bv.ptr(), gi[0]->ptr(), rows, n, k);
                      if (gi[1]) detail::gemm_tn(Av.ptr(), go.ptr(), gi[1]->ptr(), rows, k, n);
                    });
  }

  if (A.rank() != B.rank() || !std::equal(A.shape().begin(), A.shape().end() - 2, B.shape().begin())) {
    detail::shape_fail(Op::matmul, A.shape(), B.shape());
  }
  const std::size_t batch = A.numel() / (m * k);
  Tensor C(out_shape);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    detail::gemm_nn(A.ptr() + bi * m * k, B.ptr() + bi * k * n, C.ptr() + bi * m * n, m, k, n);
  }
  Graph* gp = &g;
  std::size_t ia = a.id, ib = b.id;
  return g.record(Op::matmul, {ia, ib}, std::move(C),
                  [gp, ia, ib, batch, m, k, n](const Tensor& go, std::vector<Tensor*>& gi) {
                    const Tensor& Av = gp->value(Var{gp, ia});
                    const Tensor& Bv = gp->value(Var{gp, ib});
                    for (std::size_t bi = 0; bi < batch; ++bi) {
                      const real* gob = go.ptr() + bi * m * n;
                      if (gi[0]) detail::gemm_nt(gob, Bv.ptr() + bi * k * n, gi[0]->ptr() + bi * m * k, m, n, k);
                      if (gi[1]) detail::gemm_tn(Av.ptr() + bi * m * k, gob, gi[1]->ptr() + bi * k * n, m, k, n);
                    }
                  });
}

// Elementwise a + b; b may also match the trailing dims of a (bias broadcast).
inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (!detail::is_trailing(A.shape(), B.shape())) detail::shape_fail(Op::add, A.shape(), B.shape());
  Tensor C = A;
  const std::size_t inner = B.numel();
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] += B[i % inner];
  return g.record(Op::add, {a.id, b.id}, std::move(C), [inner](const Tensor& go, std::vector<Tensor*>& gi) {
    if (gi[0])
      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i];
    if (gi[1])
      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[1])[i % inner] += go[i];
  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.shape() != B.shape()) detail::shape_fail(Op::sub, A.shape(), B.shape());
  Tensor C = A;
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] -= B[i];
  return g.record(Op::sub, {a.id, b.id}, std::move(C), [](const Tensor& go, std::vector<Tensor*>& gi) {
    if (gi[0])
      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i];
    if (gi[1])
      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[1])[i] -= go[i];
  });
}

// Elementwise a * b; b may match the trailing dims of a.
inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (!detail::is_trailing(A.shape(), B.shape())) detail::shape_fail(Op::mul, A.shape(), B.shape());
  Tensor C = A;
  const std::size_t inner = B.numel();
  for (std::size_t i = 0; i < C.numel(); ++i) C[i] *= B[i % inner];
  Graph* gp = &g;
  std::size_t ia = a.id, ib = b.id;
  return g.record(Op::mul, {ia, ib}, std::move(C), [gp, ia, ib, inner](const Tensor& go, std::vector<Tensor*>& gi) {
    const Tensor& Av = gp->value(Var{gp, ia});
    const Tensor& Bv = gp->value(Var{gp, ib});
    if (gi[0])
      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * Bv[i % inner];
    if (gi[1])
      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[1])[i % inner] += go[i] * Av[i];
  });
}

// Swaps the last two dimensions.
inline Var transpose(Var a) {
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  if (A.rank() < 2) throw DimensionError("transpose: needs rank >= 2, got " + shape_str(A.shape()));
  const std::size_t r = A.dim(-2), c = A.dim(-1), batch = A.numel() / (r * c);
  Shape s = A.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor C(s);
  for (std::size_t b = 0; b < batch; ++b) {
    auto t = detail::transpose2d(A.ptr() + b * r * c, r, c);
    std::copy(t.begin(), t.end(), C.ptr() + b * r * c);
  }
  return g.record(Op::transpose, {a.id}, std::move(C), [r, c, batch](const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t b = 0; b < batch; ++b) {
      auto t = detail::transpose2d(go.ptr() + b * r * c, c, r);
      real* dst = gi[0]->ptr() + b * r * c;
      for (std::size_t i = 0; i < r * c; ++i) dst[i] += t[i];
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = *a.graph;
  Tensor C = g.value(a).reshaped(std::move(shape));
  return g.record(Op::reshape, {a.id}, std::move(C), [](const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i];
  });
}

inline Var softmax_lastdim(Var a) {
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  const std::size_t n = A.dim(-1), rows = A.numel() / n;
  Tensor C(A.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const real* x = A.ptr() + r * n;
    real* y = C.ptr() + r * n;
    real mx = *std::max_element(x, x + n);
    real s = 0.0f;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  Graph* gp = &g;
  std::size_t self = g.size();
  return g.record(Op::softmax_lastdim, {a.id}, std::move(C),
                  [gp, self, n, rows](const Tensor& go, std::vector<Tensor*>& gi) {
                    const Tensor& Y = gp->value(Var{gp, self});
                    for (std::size_t r = 0; r < rows; ++r) {
                      const real* y = Y.ptr() + r * n;
                      const real* dy = go.ptr() + r * n;
                      real dot = 0.0f;
                      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
                      real* dx = gi[0]->ptr() + r * n;
                      for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
                    }
                  });
}

// Normalizes over the last dim: (x - mean) / sqrt(var + eps) * gain + bias.
// A constant row normalizes to exactly zero before the affine part.
inline Var layer_norm(Var x, Var gain, Var bias) {
  Graph& g = detail::same_graph({x, gain, bias});
  const Tensor& X = g.value(x);
  const Tensor& G = g.value(gain);
  const Tensor& Bv = g.value(bias);
  const std::size_t n = X.dim(-1);
  if (G.shape() != Shape{n} || Bv.shape() != Shape{n}) detail::shape_fail(Op::layer_norm, X.shape(), G.shape());
  const std::size_t rows = X.numel() / n;
  Tensor Y(X.shape());
  auto xhat = std::make_shared<std::vector<real>>(X.numel());
  auto rstd = std::make_shared<std::vector<real>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const real* xr = X.ptr() + r * n;
    real mean = 0.0f;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<real>(n);
    real var = 0.0f;
    for (std::size_t j = 0; j < n; ++j) {
      real d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<real>(n);
    real rs = 1.0f / std::sqrt(var + kLayerNormEps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      real h = (xr[j] - mean) * rs;
      (*xhat)[r * n + j] = h;
      Y[r * n + j] = h * G[j] + Bv[j];
    }
  }
  Graph* gp = &g;
  std::size_t ig = gain.id;
  return g.record(Op::layer_norm, {x.id, gain.id, bias.id}, std::move(Y),
                  [gp, ig, xhat, rstd, n, rows](const Tensor& go, std::vector<Tensor*>& gi) {
                    const Tensor& Gv = gp->value(Var{gp, ig});
                    for (std::size_t r = 0; r < rows; ++r) {
                      const real* dy = go.ptr() + r * n;
                      const real* h = xhat->data() + r * n;
                      if (gi[1])
                        for (std::size_t j = 0; j < n; ++j) (*gi[1])[j] += dy[j] * h[j];
                      if (gi[2])
                        for (std::size_t j = 0; j < n; ++j) (*gi[2])[j] += dy[j];
                      if (gi[0]) {
                        real mean_dh = 0.0f, mean_dh_h = 0.0f;
                        for (std::size_t j = 0; j < n; ++j) {
                          real dh = dy[j] * Gv[j];
                          mean_dh += dh;
                          mean_dh_h += dh * h[j];
                        }
                        mean_dh /= static_cast<real>(n);
                        mean_dh_h /= static_cast<real>(n);
                        real* dx = gi[0]->ptr() + r * n;
                        for (std::size_t j = 0; j < n; ++j) {
                          real dh = dy[j] * Gv[j];
                          dx[j] += (*rstd)[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                      }
                    }
                  });
}

// tanh-approximation GELU.
inline Var gelu(Var a) {
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.numel(); ++i) C[i] = detail::gelu_tanh(A[i]);
  Graph* gp = &g;
  std::size_t ia = a.id;
  return g.record(Op::gelu, {ia}, std::move(C), [gp, ia](const Tensor& go, std::vector<Tensor*>& gi) {
    const Tensor& Av = gp->value(Var{gp, ia});
    for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * detail::gelu_tanh_grad(Av[i]);
  });
}

// table[V, H] gathered by ids laid out as ids_shape -> [ids_shape..., H].
inline Var embedding_lookup(Var table, std::vector<std::uint32_t> ids, Shape ids_shape) {
  Graph& g = *table.graph;
  const Tensor& W = g.value(table);
  if (W.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(W.shape()));
  if (shape_numel(ids_shape) != ids.size()) {
    throw DimensionError("embedding_lookup: ids length does not match " + shape_str(ids_shape));
  }
  const std::size_t vocab = W.dim(0), h = W.dim(1);
  Shape out_shape = ids_shape;
  out_shape.push_back(h);
  Tensor C(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw DimensionError("embedding_lookup: token id " + std::to_string(ids[i]) + " >= vocab " +
                           std::to_string(vocab));
    }
    std::copy_n(W.ptr() + ids[i] * h, h, C.ptr() + i * h);
  }
  return g.record(Op::embedding_lookup, {table.id}, std::move(C),
                  [ids = std::move(ids), h](const Tensor& go, std::vector<Tensor*>& gi) {
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      real* dst = gi[0]->ptr() + ids[i] * h;
                      const real* src = go.ptr() + i * h;
                      for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
                    }
                  });
}

// Contiguous range [start, start+len) along `axis`.
inline Var slice(Var a, int axis, std::size_t start, std::size_t len) {
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  const std::size_t ax = detail::normalize_axis(axis, A.rank(), Op::slice);
  const std::size_t d = A.shape()[ax];
  if (len == 0 || start + len > d) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") outside axis of size " + std::to_string(d) + " in " + shape_str(A.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= A.shape()[i];
  for (std::size_t i = ax + 1; i < A.rank(); ++i) inner *= A.shape()[i];
  Shape s = A.shape();
  s[ax] = len;
  Tensor C(s);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(A.ptr() + (o * d + start) * inner, len * inner, C.ptr() + o * len * inner);
  }
  return g.record(Op::slice, {a.id}, std::move(C),
                  [outer, inner, d, start, len](const Tensor& go, std::vector<Tensor*>& gi) {
                    for (std::size_t o = 0; o < outer; ++o) {
                      real* dst = gi[0]->ptr() + (o * d + start) * inner;
                      const real* src = go.ptr() + o * len * inner;
                      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                    }
                  });
}

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Graph& g = *parts.front().graph;
  const Tensor& first = g.value(parts.front());
  const std::size_t ax = detail::normalize_axis(axis, first.rank(), Op::concat);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first.shape()[i];
  for (std::size_t i = ax + 1; i < first.rank(); ++i) inner *= first.shape()[i];
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.graph != &g) throw ContractError("concat: operands live on different graphs");
    const Tensor& t = g.value(p);
    Shape a = t.shape(), b = first.shape();
    if (a.size() != b.size()) detail::shape_fail(Op::concat, b, a);
    a[ax] = b[ax] = 0;
    if (a != b) detail::shape_fail(Op::concat, first.shape(), t.shape());
    widths.push_back(t.shape()[ax]);
    ids.push_back(p.id);
    total += t.shape()[ax];
  }
  Shape s = first.shape();
  s[ax] = total;
  Tensor C(s);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = g.value(parts[k]);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.ptr() + o * widths[k] * inner, widths[k] * inner, C.ptr() + (o * total + off) * inner);
    }
    off += widths[k];
  }
  return g.record(Op::concat, std::move(ids), std::move(C),
                  [outer, inner, total, widths](const Tensor& go, std::vector<Tensor*>& gi) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < widths.size(); ++k) {
                      if (gi[k]) {
                        for (std::size_t o = 0; o < outer; ++o) {
                          const real* src = go.ptr() + (o * total + off) * inner;
                          real* dst = gi[k]->ptr() + o * widths[k] * inner;
                          for (std::size_t i = 0; i < widths[k] * inner; ++i) dst[i] += src[i];
                        }
                      }
                      off += widths[k];
                    }
                  });
}

inline Var scale(Var a, real c) {
  Graph& g = *a.graph;
  Tensor C = g.value(a);
  for (real& v : C.data()) v *= c;
  return g.record(Op::scale, {a.id}, std::move(C), [c](const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * c;
  });
}

// Where keep (broadcast over leading dims) is 0, output `fill` and block the gradient.
inline Var mask_fill(Var a, const Tensor& keep, real fill) {
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  if (!detail::is_trailing(A.shape(), keep.shape())) detail::shape_fail(Op::mask_fill, A.shape(), keep.shape());
  Tensor C = A;
  const std::size_t inner = keep.numel();
  for (std::size_t i = 0; i < C.numel(); ++i)
    if (keep[i % inner] == 0.0f) C[i] = fill;
  return g.record(Op::mask_fill, {a.id}, std::move(C), [keep, inner](const Tensor& go, std::vector<Tensor*>& gi) {
    for (std::size_t i = 0; i < go.numel(); ++i)
      if (keep[i % inner] != 0.0f) (*gi[0])[i] += go[i];
  });
}

inline Var sum(Var a) {
  Graph& g = *a.graph;
  const Tensor& A = g.value(a);
  double acc = 0.0;
  for (real v : A.data()) acc += v;
  return g.record(Op::sum, {a.id}, Tensor::scalar(static_cast<real>(acc)),
                  [](const Tensor& go, std::vector<Tensor*>& gi) {
                    for (real& v : gi[0]->data()) v += go[0];
                  });
}

// Mean over elements of (a - b)^2.
inline Var mse(Var a, Var b) {
  Graph& g = detail::same_graph({a, b});
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  if (A.shape() != B.shape()) detail::shape_fail(Op::mse, A.shape(), B.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) {
    double d = static_cast<double>(A[i]) - B[i];
    acc += d * d;
  }
  const real inv = 1.0f / static_cast<real>(A.numel());
  Graph* gp = &g;
  std::size_t ia = a.id, ib = b.id;
  return g.record(Op::mse, {ia, ib}, Tensor::scalar(static_cast<real>(acc / static_cast<double>(A.numel()))),
                  [gp, ia, ib, inv](const Tensor& go, std::vector<Tensor*>& gi) {
                    const Tensor& Av = gp->value(Var{gp, ia});
                    const Tensor& Bv = gp->value(Var{gp, ib});
                    const real k = 2.0f * inv * go[0];
                    for (std::size_t i = 0; i < Av.numel(); ++i) {
                      real d = Av[i] - Bv[i];
                      if (gi[0]) (*gi[0])[i] += k * d;
                      if (gi[1]) (*gi[1])[i] -= k * d;
                    }
                  });
}

}  // namespace srlb::ad
