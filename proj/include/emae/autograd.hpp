#pragma once

// Tape-style reverse-mode differentiation. A Graph owns an append-only list
// of nodes; each node stores its output value and a closure that pushes the
// output gradient back to its inputs. Nodes can only reference earlier
// nodes, so the append order is a topological order.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emae/kernels.hpp"
#include "emae/tensor.hpp"

namespace emae {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Gradients produced by Graph::backward.
class Gradients {
 public:
  /// Gradient with respect to any node; zeros if the root does not depend on it.
  const Tensor& of(Var v) const;
  /// Gradients of named parameters.
  const std::map<std::string, Tensor>& named() const noexcept { return named_; }

 private:
  friend class Graph;
  std::vector<Tensor> by_node_;
  std::vector<bool> present_;
  std::vector<Tensor> zeros_;
  std::map<std::string, Tensor> named_;
};

class Graph {
 public:
  using BackwardFn = std::function<void(const Graph&, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push("constant", {}, std::move(value), false, nullptr); }

  Var leaf(Tensor value, bool requires_grad) {
    return push("leaf", {}, std::move(value), requires_grad, nullptr);
  }

  /// Named leaf whose gradient is reported by backward() under `name`.
  Var parameter(const std::string& name, Tensor value, bool requires_grad = true) {
    Var v = push("parameter", {}, std::move(value), requires_grad, nullptr);
    names_.emplace(v.id, name);
    return v;
  }

  /// Appends an operation node. The closure is dropped when no input needs a gradient.
  Var record(const char* op, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_.at(i).requires_grad;
    return push(op, std::move(inputs), std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const char* op_name(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar root.
  Gradients backward(Var root) const {
    if (root.graph != this) throw ContractError("backward root belongs to a different graph");
    const Tensor& rv = value(root);
    if (rv.numel() != 1) throw ContractError("backward root must be scalar, got shape " + shape_str(rv.shape()));
    Gradients g;
    g.by_node_.resize(nodes_.size());
    g.present_.assign(nodes_.size(), false);
    g.by_node_[root.id] = Tensor(rv.shape(), 1.0);
    g.present_[root.id] = true;
    std::vector<Tensor*> gin;
    for (std::size_t n = root.id + 1; n-- > 0;) {
      const Node& node = nodes_[n];
      if (!g.present_[n] || !node.backward) continue;
      gin.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t in = node.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (!g.present_[in]) {
          g.by_node_[in] = Tensor(nodes_[in].value.shape());
          g.present_[in] = true;
        }
        gin[k] = &g.by_node_[in];
      }
      node.backward(*this, g.by_node_[n], gin);
    }
    for (const auto& [id, name] : names_) {
      if (!nodes_[id].requires_grad) continue;
      g.named_[name] = g.present_[id] ? g.by_node_[id] : Tensor(nodes_[id].value.shape());
    }
    g.zeros_.resize(nodes_.size());
    for (std::size_t n = 0; n < nodes_.size(); ++n)
      if (!g.present_[n]) g.zeros_[n] = Tensor(nodes_[n].value.shape());
    return g;
  }

 private:
  struct Node {
    const char* op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad;
    BackwardFn backward;
  };

  Var push(const char* op, std::vector<std::size_t> inputs, Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), requires_grad, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::size_t, std::string> names_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

inline const Tensor& Gradients::of(Var v) const {
  if (v.id >= by_node_.size()) throw ContractError("gradient requested for node outside the graph");
  return present_[v.id] ? by_node_[v.id] : zeros_[v.id];
}

/// Differentiable operations. Every function appends one node.
namespace ad {

namespace detail {

inline Graph& same_graph(Var a, Var b) {
  if (a.graph != b.graph || a.graph == nullptr) throw ContractError("operands belong to different graphs");
  return *a.graph;
}

// True when `suffix` equals the trailing dimensions of `shape`.
inline bool is_suffix(const Shape& shape, const Shape& suffix) {
  if (suffix.size() > shape.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), shape.rbegin());
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) throw ShapeError("add " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  return g.record("add", {a.id, b.id}, std::move(out), [](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
    for (Tensor* t : gi)
      if (t)
        for (std::size_t i = 0; i < go.numel(); ++i) (*t)[i] += go[i];
  });
}

/// x + b where b's shape is a suffix of x's shape (bias, positional table).
inline Var add_broadcast(Var x, Var b) {
  Graph& g = detail::same_graph(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (!detail::is_suffix(xv.shape(), bv.shape())) {
    throw ShapeError("add_broadcast: " + shape_str(bv.shape()) + " is not a suffix of " + shape_str(xv.shape()));
  }
  const std::size_t inner = bv.numel();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] + bv[i % inner];
  return g.record("add_broadcast", {x.id, b.id}, std::move(out),
                  [inner](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    if (gi[0])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i];
                    if (gi[1])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[1])[i % inner] += go[i];
                  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) throw ShapeError("mul " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record("mul", {ia, ib}, std::move(out),
                  [ia, ib](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const Tensor& av = gr.value(ia);
                    const Tensor& bv = gr.value(ib);
                    if (gi[0])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * bv[i];
                    if (gi[1])
                      for (std::size_t i = 0; i < go.numel(); ++i) (*gi[1])[i] += go[i] * av[i];
                  });
}

/// x * s where s's shape is a suffix of x's shape.
inline Var mul_broadcast(Var x, Var s) {
  Graph& g = detail::same_graph(x, s);
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (!detail::is_suffix(xv.shape(), sv.shape())) {
    throw ShapeError("mul_broadcast: " + shape_str(sv.shape()) + " is not a suffix of " + shape_str(xv.shape()));
  }
  const std::size_t inner = sv.numel();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * sv[i % inner];
  const std::size_t ix = x.id, is = s.id;
  return g.record("mul_broadcast", {ix, is}, std::move(out),
                  [ix, is, inner](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const Tensor& xv = gr.value(ix);
                    const Tensor& sv = gr.value(is);
                    for (std::size_t i = 0; i < go.numel(); ++i) {
                      if (gi[0]) (*gi[0])[i] += go[i] * sv[i % inner];
                      if (gi[1]) (*gi[1])[i % inner] += go[i] * xv[i];
                    }
                  });
}

inline Var scale(Var x, double c) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * c;
  return x.graph->record("scale", {x.id}, std::move(out),
                         [c](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                           for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * c;
                         });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.graph->record("sum", {x.id}, Tensor::scalar(s),
                         [](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                           for (double& v : gi[0]->data()) v += go[0];
                         });
}

/// Row-wise affine map over the last dimension: x[..., in] W[in x out] + b[out].
inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
  Graph& g = detail::same_graph(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.shape().back() != wv.dim(0)) {
    throw ShapeError("linear dimension mismatch: " + shape_str(xv.shape()) + " x " + shape_str(wv.shape()));
  }
  const std::size_t in = wv.dim(0), out_dim = wv.dim(1), rows = xv.numel() / in;
  if (b && b->value().numel() != out_dim) {
    throw ShapeError("linear bias " + shape_str(b->shape()) + " for output width " + std::to_string(out_dim));
  }
  Shape os = xv.shape();
  os.back() = out_dim;
  Tensor out(os);
  if (b) {
    const Tensor& bv = b->value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * out_dim));
  }
  kernels::gemm_nn(xv.data().data(), wv.data().data(), out.data().data(), rows, in, out_dim);
  std::vector<std::size_t> inputs{x.id, w.id};
  if (b) inputs.push_back(b->id);
  const std::size_t ix = x.id, iw = w.id;
  return g.record("linear", std::move(inputs), std::move(out),
                  [ix, iw, rows, in, out_dim](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    const double* gop = go.data().data();
                    if (gi[0]) kernels::gemm_nt(gop, gr.value(iw).data().data(), gi[0]->data().data(), rows, in, out_dim);
                    if (gi[1]) kernels::gemm_tn(gr.value(ix).data().data(), gop, gi[1]->data().data(), rows, in, out_dim);
                    if (gi.size() > 2 && gi[2])
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < out_dim; ++j) (*gi[2])[j] += gop[r * out_dim + j];
                  });
}

inline Var matmul(Var a, Var b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return linear(a, b);
}

inline Var conv2d(Var x, Var kernel, std::optional<Var> bias, Stride2 stride, std::size_t groups) {
  Graph& g = detail::same_graph(x, kernel);
  const auto geo = kernels::conv2d_geometry(x.shape(), kernel.shape(), stride.h, stride.w, groups);
  if (bias && bias->value().numel() != geo.out_channels) {
    throw ShapeError("conv2d bias " + shape_str(bias->shape()) + " for " + std::to_string(geo.out_channels) +
                     " output channels");
  }
  Tensor out(Shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w});
  kernels::conv2d_forward(geo, x.value().data().data(), kernel.value().data().data(),
                          bias ? bias->value().data().data() : nullptr, out.data().data());
  std::vector<std::size_t> inputs{x.id, kernel.id};
  if (bias) inputs.push_back(bias->id);
  const std::size_t ix = x.id, ik = kernel.id;
  return g.record("conv2d", std::move(inputs), std::move(out),
                  [geo, ix, ik](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    kernels::conv2d_backward(geo, gr.value(ix).data().data(), gr.value(ik).data().data(),
                                             go.data().data(), gi[0] ? gi[0]->data().data() : nullptr,
                                             gi[1] ? gi[1]->data().data() : nullptr,
                                             gi.size() > 2 && gi[2] ? gi[2]->data().data() : nullptr);
                  });
}

inline Var pad2d(Var x, std::size_t pad_h, std::size_t pad_w) {
  Tensor out = emae::pad2d(x.value(), pad_h, pad_w);
  const Shape in_shape = x.shape();
  return x.graph->record("pad2d", {x.id}, std::move(out),
                         [in_shape, pad_h, pad_w](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                           const std::size_t n = in_shape[0] * in_shape[1], h = in_shape[2], w = in_shape[3];
                           const std::size_t oh = h + 2 * pad_h, ow = w + 2 * pad_w;
                           for (std::size_t p = 0; p < n; ++p)
                             for (std::size_t y = 0; y < h; ++y)
                               for (std::size_t xx = 0; xx < w; ++xx)
                                 (*gi[0])[(p * h + y) * w + xx] += go[(p * oh + y + pad_h) * ow + xx + pad_w];
                         });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Graph& g = detail::same_graph(x, gamma);
  const Tensor& xv = x.value();
  const std::size_t d = xv.shape().back();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw ShapeError("layer_norm last dimension " + std::to_string(d) + " vs gamma " + shape_str(gamma.shape()));
  }
  const std::size_t rows = xv.numel() / d;
  Tensor out(xv.shape());
  auto stats = std::make_shared<std::vector<double>>(2 * rows);
  kernels::layer_norm_forward(xv.data().data(), gamma.value().data().data(), beta.value().data().data(), eps, rows, d,
                              out.data().data(), stats->data(), stats->data() + rows);
  const std::size_t ix = x.id, ig = gamma.id;
  return g.record("layer_norm", {x.id, gamma.id, beta.id}, std::move(out),
                  [ix, ig, rows, d, stats](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    kernels::layer_norm_backward(gr.value(ix).data().data(), gr.value(ig).data().data(),
                                                 stats->data(), stats->data() + rows, go.data().data(), rows, d,
                                                 gi[0] ? gi[0]->data().data() : nullptr,
                                                 gi[1] ? gi[1]->data().data() : nullptr,
                                                 gi[2] ? gi[2]->data().data() : nullptr);
                  });
}

inline Var softmax(Var x) {
  Tensor out = emae::softmax(x.value());
  const std::size_t d = x.shape().back();
  const std::size_t rows = out.numel() / d;
  Graph& g = *x.graph;
  const std::size_t self = g.size();
  return g.record("softmax", {x.id}, std::move(out),
                  [self, rows, d](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                    kernels::softmax_rows_backward(gr.value(self).data().data(), go.data().data(),
                                                   gi[0]->data().data(), rows, d);
                  });
}

inline Var gelu(Var x) {
  const std::size_t ix = x.id;
  return x.graph->record("gelu", {x.id}, emae::gelu(x.value()),
                         [ix](const Graph& gr, const Tensor& go, std::span<Tensor* const> gi) {
                           const Tensor& xv = gr.value(ix);
                           for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i] * kernels::gelu_grad(xv[i]);
                         });
}

inline Var reshape(Var x, Shape shape) {
  return x.graph->record("reshape", {x.id}, x.value().reshaped(std::move(shape)),
                         [](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                           for (std::size_t i = 0; i < go.numel(); ++i) (*gi[0])[i] += go[i];
                         });
}

inline Var permute(Var x, std::vector<std::size_t> perm) {
  const Shape& in_shape = x.shape();
  if (perm.size() != in_shape.size()) throw ShapeError("permute rank mismatch for " + shape_str(in_shape));
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw ContractError("permute order is not a permutation");
    seen[p] = true;
  }
  Shape out_shape(perm.size());
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out_shape[i] = in_shape[perm[i]];
    inverse[perm[i]] = i;
  }
  Tensor out(out_shape);
  kernels::permute_copy(x.value().data().data(), in_shape, perm, out.data().data(), false);
  return x.graph->record("permute", {x.id}, std::move(out),
                         [out_shape, inverse](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                           kernels::permute_copy(go.data().data(), out_shape, inverse, gi[0]->data().data(), true);
                         });
}

/// Slice [start, start+len) along dimension `dim`.
inline Var narrow(Var x, std::size_t dim, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  if (dim >= s.size() || len == 0 || start + len > s[dim]) {
    throw ShapeError("narrow(" + std::to_string(dim) + ", " + std::to_string(start) + ", " + std::to_string(len) +
                     ") out of range for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= s[i];
  for (std::size_t i = dim + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t full = s[dim];
  Shape os = s;
  os[dim] = len;
  Tensor out(os);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[(o * len + k) * inner + i] = xv[(o * full + start + k) * inner + i];
  return x.graph->record("narrow", {x.id}, std::move(out),
                         [outer, inner, full, start, len](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t k = 0; k < len; ++k)
                               for (std::size_t i = 0; i < inner; ++i)
                                 (*gi[0])[(o * full + start + k) * inner + i] += go[(o * len + k) * inner + i];
                         });
}

/// Prepends one learned token to every sequence: tok[d], x[B x L x d] -> [B x (L+1) x d].
inline Var prepend_token(Var token, Var x) {
  Graph& g = detail::same_graph(token, x);
  const Tensor& xv = x.value();
  const Tensor& tv = token.value();
  if (xv.rank() != 3 || tv.numel() != xv.dim(2)) {
    throw ShapeError("prepend_token " + shape_str(tv.shape()) + " onto " + shape_str(xv.shape()));
  }
  const std::size_t batch = xv.dim(0), len = xv.dim(1), d = xv.dim(2);
  Tensor out(Shape{batch, len + 1, d});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(tv.data().begin(), tv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * (len + 1) * d));
    std::copy(xv.data().begin() + static_cast<std::ptrdiff_t>(b * len * d),
              xv.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * len * d),
              out.data().begin() + static_cast<std::ptrdiff_t>((b * (len + 1) + 1) * d));
  }
  return g.record("prepend_token", {token.id, x.id}, std::move(out),
                  [batch, len, d](const Graph&, const Tensor& go, std::span<Tensor* const> gi) {
                    for (std::size_t b = 0; b < batch; ++b) {
                      for (std::size_t k = 0; k < d; ++k) {
                        if (gi[0]) (*gi[0])[k] += go[b * (len + 1) * d + k];
                      }
                      if (gi[1])
                        for (std::size_t i = 0; i < len * d; ++i) (*gi[1])[b * len * d + i] += go[(b * (len + 1) + 1) * d + i];
                    }
                  });
}

/// Scaled dot-product self-attention on packed projections qkv[B x L x 3d].
inline Var attention(Var qkv, std::size_t heads) {
  const Tensor& v = qkv.value();
  if (v.rank() != 3 || v.dim(2) % 3 != 0 || heads == 0 || (v.dim(2) / 3) % heads != 0) {
    throw ShapeError("attention expects [B x L x 3d] with d divisible by heads, got " + shape_str(v.shape()));
  }
  const std::size_t batch = v.dim(0), len = v.dim(1), d = v.dim(2) / 3;
  Tensor out(Shape{batch, len, d});
  auto probs = std::make_shared<std::vector<double>>(batch * heads * len * len);
  kernels::attention_forward(v.data().data(), batch, len, d, heads, out.data().data(), probs->data());
  const std::size_t iq = qkv.id;
  return qkv.graph->record("attention", {qkv.id}, std::move(out),
                           [iq, probs, batch, len, d, heads](const Graph& gr, const Tensor& go,
                                                             std::span<Tensor* const> gi) {
                             kernels::attention_backward(gr.value(iq).data().data(), probs->data(), go.data().data(),
                                                         batch, len, d, heads, gi[0]->data().data());
                           });
}

}  // namespace ad

}  // namespace emae
