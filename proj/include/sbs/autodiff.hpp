#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sbs/tensor.hpp"

namespace sbs::ad {

class Node;
using NodePtr = std::shared_ptr<Node>;

// Pull one upstream gradient through an edge back to a parent.
using PullFn = std::function<Tensor(const Tensor& upstream)>;

struct Edge {
  NodePtr parent;
  PullFn pull;
};

// One value in a define-by-run graph. Edges point at parents; backward walks
// them in reverse topological order.
class Node {
 public:
  Node(Tensor value, bool requires_grad, std::string op, std::vector<Edge> edges)
      : value_(std::move(value)),
        requires_grad_(requires_grad),
        op_(std::move(op)),
        edges_(std::move(edges)) {}

  const Tensor& value() const { return value_; }
  bool requires_grad() const { return requires_grad_; }
  const std::string& op() const { return op_; }
  const std::vector<Edge>& edges() const { return edges_; }

 private:
  Tensor value_;
  bool requires_grad_;
  std::string op_;
  std::vector<Edge> edges_;
};

inline NodePtr constant(Tensor v, std::string op = "constant") {
  return std::make_shared<Node>(std::move(v), false, std::move(op), std::vector<Edge>{});
}

inline NodePtr parameter(Tensor v, std::string op = "parameter") {
  return std::make_shared<Node>(std::move(v), true, std::move(op), std::vector<Edge>{});
}

namespace detail {

inline bool any_requires_grad(const std::vector<NodePtr>& ins) {
  for (const auto& n : ins) {
    if (n->requires_grad()) return true;
  }
  return false;
}

// Edges are only recorded for parents that can use a gradient.
inline NodePtr make(Tensor value, std::string op, std::vector<Edge> edges) {
  std::vector<Edge> kept;
  kept.reserve(edges.size());
  for (auto& e : edges) {
    if (e.parent->requires_grad()) kept.push_back(std::move(e));
  }
  return std::make_shared<Node>(std::move(value), !kept.empty(), std::move(op),
                                std::move(kept));
}

// Gradient of a scalar-broadcast binary toward one side: if that side is a
// scalar but the result is not, contributions are summed into it.
inline Tensor reduce_to_shape(const Tensor& g, const Tensor& like) {
  if (g.same_shape(like)) return g;
  if (like.is_scalar()) return Tensor::scalar(sum(g));
  throw std::runtime_error("backward: gradient shape " +
                           Tensor::shape_string(g.shape()) +
                           " does not reduce to " +
                           Tensor::shape_string(like.shape()));
}

}  // namespace detail

// ---- gradients ----

class Gradients {
 public:
  void add(const Node* n, Tensor g) {
    auto it = by_node_.find(n);
    if (it == by_node_.end()) {
      by_node_.emplace(n, std::move(g));
    } else {
      it->second = sbs::add(it->second, g);
    }
  }

  bool contains(const NodePtr& n) const { return by_node_.count(n.get()) != 0; }

  const Tensor& at(const NodePtr& n) const {
    auto it = by_node_.find(n.get());
    if (it == by_node_.end()) {
      throw std::invalid_argument("Gradients::at: node '" + n->op() +
                                  "' has no recorded gradient");
    }
    return it->second;
  }

  // Zero tensor for unreached parameters; keeps optimizer loops uniform.
  Tensor get_or_zeros(const NodePtr& n) const {
    auto it = by_node_.find(n.get());
    if (it == by_node_.end()) return Tensor::zeros(n->value().shape());
    return it->second;
  }

  const Tensor* find(const Node* n) const {
    auto it = by_node_.find(n);
    return it == by_node_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<const Node*, Tensor> by_node_;
};

// Reverse-mode sweep from a scalar root. Each node's pull functions run
// exactly once, after the node's own gradient is fully accumulated; the
// traversal order is fixed by the graph, so results are deterministic.
inline Gradients backward(const NodePtr& root) {
  if (!root->value().is_scalar()) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                Tensor::shape_string(root->value().shape()));
  }

  // Iterative DFS post-order; reversed it is a topological order.
  std::vector<const Node*> topo;
  {
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<const Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->edges().size()) {
        const Node* p = node->edges()[next].parent.get();
        ++next;
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }
  }

  Gradients grads;
  grads.add(root.get(), Tensor::scalar(1.0));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const Node* node = *it;
    const Tensor* g = grads.find(node);
    if (g == nullptr) continue;
    const Tensor upstream = *g;
    for (const Edge& e : node->edges()) {
      grads.add(e.parent.get(), e.pull(upstream));
    }
  }
  return grads;
}

// ---- custom gradient registration ----

// A custom op pairs a forward with an explicit backward; the backward must
// return one gradient per input. Used for every straight-through estimator.
struct CustomOp {
  std::string name;
  std::size_t arity;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  std::function<std::vector<Tensor>(const std::vector<Tensor>& inputs,
                                    const Tensor& upstream)>
      backward;
};

inline CustomOp register_custom_grad(
    std::string name, std::size_t arity,
    std::function<Tensor(const std::vector<Tensor>&)> forward,
    std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)>
        backward) {
  if (arity == 0) {
    throw std::invalid_argument("register_custom_grad: '" + name +
                                "' must take at least one input");
  }
  return CustomOp{std::move(name), arity, std::move(forward), std::move(backward)};
}

inline NodePtr apply(const CustomOp& op, const std::vector<NodePtr>& inputs) {
  if (inputs.size() != op.arity) {
    throw std::invalid_argument("apply: op '" + op.name + "' expects " +
                                std::to_string(op.arity) + " inputs, got " +
                                std::to_string(inputs.size()));
  }
  std::vector<Tensor> vals;
  vals.reserve(inputs.size());
  for (const auto& n : inputs) vals.push_back(n->value());
  Tensor out = op.forward(vals);

  std::vector<Edge> edges;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::string name = op.name;
    const std::size_t arity = op.arity;
    auto bwd = op.backward;
    edges.push_back(Edge{inputs[i], [name, arity, bwd, vals, i](const Tensor& up) {
                           std::vector<Tensor> gs = bwd(vals, up);
                           if (gs.size() != arity) {
                             throw std::runtime_error(
                                 "backward: op '" + name + "' returned " +
                                 std::to_string(gs.size()) + " gradients for " +
                                 std::to_string(arity) + " inputs");
                           }
                           return gs[i];
                         }});
  }
  return detail::make(std::move(out), op.name, std::move(edges));
}

// ---- built-in ops ----

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
  Tensor out = sbs::add(a->value(), b->value());
  const Tensor av = a->value(), bv = b->value();
  return detail::make(
      std::move(out), "add",
      {Edge{a, [av](const Tensor& up) { return detail::reduce_to_shape(up, av); }},
       Edge{b, [bv](const Tensor& up) { return detail::reduce_to_shape(up, bv); }}});
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
  Tensor out = sbs::sub(a->value(), b->value());
  const Tensor av = a->value(), bv = b->value();
  return detail::make(
      std::move(out), "sub",
      {Edge{a, [av](const Tensor& up) { return detail::reduce_to_shape(up, av); }},
       Edge{b,
            [bv](const Tensor& up) { return detail::reduce_to_shape(neg(up), bv); }}});
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
  Tensor out = sbs::mul(a->value(), b->value());
  const Tensor av = a->value(), bv = b->value();
  return detail::make(std::move(out), "mul",
                      {Edge{a,
                            [av, bv](const Tensor& up) {
                              return detail::reduce_to_shape(sbs::mul(up, bv), av);
                            }},
                       Edge{b, [av, bv](const Tensor& up) {
                              return detail::reduce_to_shape(sbs::mul(up, av), bv);
                            }}});
}

inline NodePtr div(const NodePtr& a, const NodePtr& b) {
  Tensor out = sbs::div(a->value(), b->value());
  const Tensor av = a->value(), bv = b->value();
  return detail::make(
      std::move(out), "div",
      {Edge{a,
            [av, bv](const Tensor& up) {
              return detail::reduce_to_shape(sbs::div(up, bv), av);
            }},
       Edge{b, [av, bv](const Tensor& up) {
              Tensor g = sbs::mul(up, sbs::div(av, sbs::mul(bv, bv)));
              return detail::reduce_to_shape(neg(g), bv);
            }}});
}

inline NodePtr neg(const NodePtr& a) {
  return detail::make(sbs::neg(a->value()), "neg",
                      {Edge{a, [](const Tensor& up) { return sbs::neg(up); }}});
}

inline NodePtr mul_scalar(const NodePtr& a, double c) {
  return detail::make(scale(a->value(), c), "mul_scalar",
                      {Edge{a, [c](const Tensor& up) { return scale(up, c); }}});
}

inline NodePtr add_scalar(const NodePtr& a, double c) {
  return detail::make(map(a->value(), [c](double v) { return v + c; }), "add_scalar",
                      {Edge{a, [](const Tensor& up) { return up; }}});
}

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  Tensor out = sbs::matmul(a->value(), b->value());
  const Tensor av = a->value(), bv = b->value();
  return detail::make(
      std::move(out), "matmul",
      {Edge{a,
            [bv](const Tensor& up) { return sbs::matmul(up, transpose(bv)); }},
       Edge{b,
            [av](const Tensor& up) { return sbs::matmul(transpose(av), up); }}});
}

// y = x * W^T + b with b added per row. x is [n, in], W is [out, in],
// b is [out]; the row-wise bias is part of this op's contract, not a general
// broadcasting rule.
inline NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
  const Tensor& xv = x->value();
  const Tensor& wv = w->value();
  const Tensor& bv = b->value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.cols()) {
    throw std::invalid_argument("linear: incompatible shapes " +
                                Tensor::shape_string(xv.shape()) + " vs " +
                                Tensor::shape_string(wv.shape()));
  }
  if (bv.rank() != 1 || bv.size() != wv.rows()) {
    throw std::invalid_argument("linear: bias shape " +
                                Tensor::shape_string(bv.shape()) +
                                " does not match " + std::to_string(wv.rows()) +
                                " output features");
  }
  Tensor out = sbs::matmul(xv, transpose(wv));
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += bv[j];
  }
  const Tensor xc = xv, wc = wv;
  return detail::make(
      std::move(out), "linear",
      {Edge{x, [wc](const Tensor& up) { return sbs::matmul(up, wc); }},
       Edge{w, [xc](const Tensor& up) { return sbs::matmul(transpose(up), xc); }},
       Edge{b, [](const Tensor& up) {
              Tensor g = Tensor::zeros({up.cols()});
              for (std::size_t i = 0; i < up.rows(); ++i) {
                for (std::size_t j = 0; j < up.cols(); ++j) g[j] += up.at(i, j);
              }
              return g;
            }}});
}

inline NodePtr relu(const NodePtr& a) {
  Tensor out = map(a->value(), [](double v) { return v > 0.0 ? v : 0.0; });
  const Tensor av = a->value();
  return detail::make(std::move(out), "relu",
                      {Edge{a, [av](const Tensor& up) {
                              Tensor g = up;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                if (av[i] <= 0.0) g[i] = 0.0;
                              }
                              return g;
                            }}});
}

inline NodePtr sigmoid(const NodePtr& a) {
  Tensor out = map(a->value(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  const Tensor ov = out;
  return detail::make(std::move(out), "sigmoid",
                      {Edge{a, [ov](const Tensor& up) {
                              Tensor g = up;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                g[i] *= ov[i] * (1.0 - ov[i]);
                              }
                              return g;
                            }}});
}

inline NodePtr log(const NodePtr& a) {
  for (double v : a->value().data()) {
    if (v <= 0.0) {
      throw std::invalid_argument("log: input must be positive, got " +
                                  std::to_string(v));
    }
  }
  Tensor out = map(a->value(), [](double v) { return std::log(v); });
  const Tensor av = a->value();
  return detail::make(std::move(out), "log",
                      {Edge{a, [av](const Tensor& up) {
                              Tensor g = up;
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] /= av[i];
                              return g;
                            }}});
}

inline NodePtr sqrt(const NodePtr& a) {
  Tensor out = map(a->value(), [](double v) { return std::sqrt(v); });
  const Tensor ov = out;
  return detail::make(std::move(out), "sqrt",
                      {Edge{a, [ov](const Tensor& up) {
                              Tensor g = up;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                g[i] *= 0.5 / ov[i];
                              }
                              return g;
                            }}});
}

inline NodePtr sum(const NodePtr& a) {
  const Tensor av = a->value();
  return detail::make(Tensor::scalar(sbs::sum(av)), "sum",
                      {Edge{a, [av](const Tensor& up) {
                              return Tensor::full(av.shape(), up.item());
                            }}});
}

inline NodePtr mean(const NodePtr& a) {
  const Tensor av = a->value();
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return detail::make(Tensor::scalar(sbs::mean(av)), "mean",
                      {Edge{a, [av, inv_n](const Tensor& up) {
                              return Tensor::full(av.shape(), up.item() * inv_n);
                            }}});
}

// Softmax over a rank-1 tensor.
inline NodePtr softmax(const NodePtr& a) {
  const Tensor& av = a->value();
  if (av.rank() != 1) {
    throw std::invalid_argument("softmax: expected rank-1 tensor, got " +
                                Tensor::shape_string(av.shape()));
  }
  double mx = av[0];
  for (double v : av.data()) mx = std::max(mx, v);
  Tensor out = map(av, [mx](double v) { return std::exp(v - mx); });
  const double z = sbs::sum(out);
  for (double& v : out.data()) v /= z;
  const Tensor p = out;
  return detail::make(std::move(out), "softmax",
                      {Edge{a, [p](const Tensor& up) {
                              double dot = 0.0;
                              for (std::size_t i = 0; i < p.size(); ++i) {
                                dot += up[i] * p[i];
                              }
                              Tensor g = p;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                g[i] = p[i] * (up[i] - dot);
                              }
                              return g;
                            }}});
}

// Mean cross-entropy of logits [n, classes] against integer labels.
inline NodePtr cross_entropy_logits(const NodePtr& logits,
                                    const std::vector<int>& labels) {
  const Tensor& lv = logits->value();
  if (lv.rank() != 2 || lv.rows() != labels.size()) {
    throw std::invalid_argument("cross_entropy_logits: logits " +
                                Tensor::shape_string(lv.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = lv.rows(), c = lv.cols();
  Tensor probs = Tensor::zeros({n, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = lv.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(lv.at(i, j) - mx);
    const double logz = std::log(z) + mx;
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw std::invalid_argument("cross_entropy_logits: label " +
                                  std::to_string(y) + " out of range for " +
                                  std::to_string(c) + " classes");
    }
    loss += logz - lv.at(i, y);
    for (std::size_t j = 0; j < c; ++j) {
      probs.at(i, j) = std::exp(lv.at(i, j) - logz);
    }
  }
  loss /= static_cast<double>(n);
  const Tensor pc = probs;
  const std::vector<int> yc = labels;
  return detail::make(Tensor::scalar(loss), "cross_entropy_logits",
                      {Edge{logits, [pc, yc](const Tensor& up) {
                              const double u = up.item() / static_cast<double>(pc.rows());
                              Tensor g = pc;
                              for (std::size_t i = 0; i < g.rows(); ++i) {
                                g.at(i, yc[i]) -= 1.0;
                              }
                              return scale(g, u);
                            }}});
}

// Concatenate rank-2 nodes along rows; backward slices the upstream back.
inline NodePtr concat_rows(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t cols = parts[0]->value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p->value().rank() != 2 || p->value().cols() != cols) {
      throw std::invalid_argument("concat_rows: column mismatch");
    }
    rows += p->value().rows();
  }
  Tensor out = Tensor::zeros({rows, cols});
  std::size_t r0 = 0;
  std::vector<Edge> edges;
  for (const auto& p : parts) {
    const Tensor& pv = p->value();
    for (std::size_t i = 0; i < pv.rows(); ++i) {
      for (std::size_t j = 0; j < cols; ++j) out.at(r0 + i, j) = pv.at(i, j);
    }
    const std::size_t start = r0, nrows = pv.rows();
    edges.push_back(Edge{p, [start, nrows, cols](const Tensor& up) {
                           Tensor g = Tensor::zeros({nrows, cols});
                           for (std::size_t i = 0; i < nrows; ++i) {
                             for (std::size_t j = 0; j < cols; ++j) {
                               g.at(i, j) = up.at(start + i, j);
                             }
                           }
                           return g;
                         }});
    r0 += pv.rows();
  }
  return detail::make(std::move(out), "concat_rows", std::move(edges));
}

// Row slice [r0, r1) of a rank-2 node.
inline NodePtr slice_rows(const NodePtr& a, std::size_t r0, std::size_t r1) {
  const Tensor& av = a->value();
  if (av.rank() != 2 || r1 > av.rows() || r0 >= r1) {
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) +
                                "," + std::to_string(r1) + ") for " +
                                Tensor::shape_string(av.shape()));
  }
  const std::size_t cols = av.cols(), nrows = r1 - r0;
  Tensor out = Tensor::zeros({nrows, cols});
  for (std::size_t i = 0; i < nrows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = av.at(r0 + i, j);
  }
  const std::size_t full_rows = av.rows();
  return detail::make(std::move(out), "slice_rows",
                      {Edge{a, [r0, nrows, cols, full_rows](const Tensor& up) {
                              Tensor g = Tensor::zeros({full_rows, cols});
                              for (std::size_t i = 0; i < nrows; ++i) {
                                for (std::size_t j = 0; j < cols; ++j) {
                                  g.at(r0 + i, j) = up.at(i, j);
                                }
                              }
                              return g;
                            }}});
}

// One element of a rank-1 node as a scalar node.
inline NodePtr index(const NodePtr& a, std::size_t i) {
  const Tensor& av = a->value();
  if (av.rank() != 1 || i >= av.size()) {
    throw std::invalid_argument("index: position " + std::to_string(i) +
                                " out of range for " +
                                Tensor::shape_string(av.shape()));
  }
  const std::vector<std::size_t> shape = av.shape();
  return detail::make(Tensor::scalar(av[i]), "index",
                      {Edge{a, [shape, i](const Tensor& up) {
                              Tensor g = Tensor::zeros(shape);
                              g[i] = up.item();
                              return g;
                            }}});
}

}  // namespace sbs::ad
