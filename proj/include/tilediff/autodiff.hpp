// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff on flat float32 buffers with shape metadata.
// A Graph is a tape: nodes only reference earlier nodes, so reverse creation
// order is a valid topological order for backprop. Graphs are built per
// sample and discarded; parameters live outside the tape and accumulate
// gradients across samples until the optimizer steps.
//
// Convention: an n-d shape is stored row-major (C order), so a [C,H,W]
// feature map doubles as a [C, H*W] row-major matrix without copying.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tilediff/common.hpp"

namespace tilediff::nn {

using Arr = Eigen::ArrayXf;
using Shape = std::vector<int>;
using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

inline long numel(const Shape& s) {
  long n = 1;
  for (int d : s) n *= d;
  return n;
}

struct Param {
  std::string name;
  Shape shape;
  Arr value;
  Arr grad;
  Arr m, v;  // optimizer moments
};

class ParamStore {
 public:
  Param& create(const std::string& name, Shape shape) {
    if (by_name_.count(name)) throw TrainError("duplicate parameter: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->shape = std::move(shape);
    const long n = numel(p->shape);
    p->value = Arr::Zero(n);
    p->grad = Arr::Zero(n);
    p->m = Arr::Zero(n);
    p->v = Arr::Zero(n);
    Param* raw = p.get();
    by_name_[name] = raw;
    params_.push_back(std::move(p));
    return *raw;
  }

  Param* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  Param& at(const std::string& name) {
    Param* p = find(name);
    if (!p) throw TrainError("unknown parameter: " + name);
    return *p;
  }

  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }

  long count() const {
    long n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::map<std::string, Param*> by_name_;
};

class Graph;

struct Node {
  Arr val;
  const Arr* ext = nullptr;  // external storage (params, views); val unused
  Arr grad;                  // lazily allocated; empty means untouched
  Shape shape;
  bool needs_grad = false;
  std::function<void()> back;
};

inline const Arr& value_of(const Node* n) { return n->ext ? *n->ext : n->val; }

inline void ensure_grad(Node* n) {
  if (n->grad.size() == 0) n->grad = Arr::Zero(value_of(n).size());
}

struct Var {
  Node* n = nullptr;
  const Arr& val() const { return value_of(n); }
  const Shape& shape() const { return n->shape; }
  long size() const { return val().size(); }
};

class Graph {
 public:
  Var make(Arr val, Shape shape, bool needs_grad, std::function<void()> back = {}) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    if (numel(shape) != val.size()) throw TrainError("node shape/value mismatch");
    n->val = std::move(val);
    n->shape = std::move(shape);
    n->needs_grad = needs_grad;
    n->back = std::move(back);
    return Var{n};
  }

  Var make_view(const Arr* ext, Shape shape, bool needs_grad,
                std::function<void()> back = {}) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    if (numel(shape) != ext->size()) throw TrainError("view shape/value mismatch");
    n->ext = ext;
    n->shape = std::move(shape);
    n->needs_grad = needs_grad;
    n->back = std::move(back);
    return Var{n};
  }

  Var constant(Arr val, Shape shape) { return make(std::move(val), std::move(shape), false); }

  Var input(Arr val, Shape shape) { return constant(std::move(val), std::move(shape)); }

  // Parameter leaf: reads the param in place, accumulates into param.grad.
  Var param(Param& p) {
    Var v = make_view(&p.value, p.shape, true);
    Node* n = v.n;
    Param* pp = &p;
    n->back = [n, pp]() { pp->grad += n->grad; };
    return v;
  }

  void backward(Var loss) {
    if (loss.size() != 1) throw TrainError("backward target must be scalar");
    ensure_grad(loss.n);
    loss.n->grad(0) = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = it->get();
      if (n->grad.size() > 0 && n->back) n->back();
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_size(const Var& a, const Var& b, const char* op) {
  if (a.size() != b.size()) throw TrainError(std::string(op) + ": size mismatch");
}
}  // namespace detail

inline Var add(Graph& g, Var a, Var b) {
  detail::check_same_size(a, b, "add");
  const bool ng = a.n->needs_grad || b.n->needs_grad;
  Var out = g.make(a.val() + b.val(), a.shape(), ng);
  if (ng) {
    Node *on = out.n, *an = a.n, *bn = b.n;
    on->back = [on, an, bn]() {
      if (an->needs_grad) { ensure_grad(an); an->grad += on->grad; }
      if (bn->needs_grad) { ensure_grad(bn); bn->grad += on->grad; }
    };
  }
  return out;
}

inline Var sub(Graph& g, Var a, Var b) {
  detail::check_same_size(a, b, "sub");
  const bool ng = a.n->needs_grad || b.n->needs_grad;
  Var out = g.make(a.val() - b.val(), a.shape(), ng);
  if (ng) {
    Node *on = out.n, *an = a.n, *bn = b.n;
    on->back = [on, an, bn]() {
      if (an->needs_grad) { ensure_grad(an); an->grad += on->grad; }
      if (bn->needs_grad) { ensure_grad(bn); bn->grad -= on->grad; }
    };
  }
  return out;
}

inline Var mul(Graph& g, Var a, Var b) {
  detail::check_same_size(a, b, "mul");
  const bool ng = a.n->needs_grad || b.n->needs_grad;
  Var out = g.make(a.val() * b.val(), a.shape(), ng);
  if (ng) {
    Node *on = out.n, *an = a.n, *bn = b.n;
    on->back = [on, an, bn]() {
      if (an->needs_grad) { ensure_grad(an); an->grad += on->grad * value_of(bn); }
      if (bn->needs_grad) { ensure_grad(bn); bn->grad += on->grad * value_of(an); }
    };
  }
  return out;
}

inline Var scale(Graph& g, Var a, float s) {
  Var out = g.make(a.val() * s, a.shape(), a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    on->back = [on, an, s]() { ensure_grad(an); an->grad += on->grad * s; };
  }
  return out;
}

inline Var add_scalar(Graph& g, Var a, float s) {
  Var out = g.make(a.val() + s, a.shape(), a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    on->back = [on, an]() { ensure_grad(an); an->grad += on->grad; };
  }
  return out;
}

inline Var detach(Graph& g, Var a) { return g.make(a.val(), a.shape(), false); }

inline Var reshape(Graph& g, Var a, Shape shape) {
  if (numel(shape) != a.size()) throw TrainError("reshape: numel mismatch");
  Var out = g.make_view(&value_of(a.n), std::move(shape), a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    on->back = [on, an]() { ensure_grad(an); an->grad += on->grad; };
  }
  return out;
}

inline Var relu(Graph& g, Var a) {
  Var out = g.make(a.val().max(0.0f), a.shape(), a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    on->back = [on, an]() {
      ensure_grad(an);
      an->grad += on->grad * (value_of(an) > 0.0f).cast<float>();
    };
  }
  return out;
}

inline Var silu(Graph& g, Var a) {
  Arr sig = 1.0f / (1.0f + (-a.val()).exp());
  Var out = g.make(a.val() * sig, a.shape(), a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    Arr sig_c = sig;
    on->back = [on, an, sig_c]() {
      ensure_grad(an);
      an->grad += on->grad * sig_c * (1.0f + value_of(an) * (1.0f - sig_c));
    };
  }
  return out;
}

inline Var gelu(Graph& g, Var a) {
  static constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  static constexpr float kA = 0.044715f;
  const Arr& x = a.val();
  Arr u = kC * (x + kA * x.cube());
  Arr t = u.tanh();
  Var out = g.make(0.5f * x * (1.0f + t), a.shape(), a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    Arr t_c = t;
    on->back = [on, an, t_c]() {
      ensure_grad(an);
      const Arr& x2 = value_of(an);
      Arr du = kC * (1.0f + 3.0f * kA * x2.square());
      an->grad += on->grad * (0.5f * (1.0f + t_c) + 0.5f * x2 * (1.0f - t_c.square()) * du);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Var sum_all(Graph& g, Var a) {
  Arr v(1);
  v(0) = a.val().sum();
  Var out = g.make(std::move(v), {1}, a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    on->back = [on, an]() { ensure_grad(an); an->grad += on->grad(0); };
  }
  return out;
}

inline Var mean_all(Graph& g, Var a) { return scale(g, sum_all(g, a), 1.0f / static_cast<float>(a.size())); }

// Squared L2 norm of the flattened tensor.
inline Var sum_squares(Graph& g, Var a) {
  Arr v(1);
  v(0) = a.val().square().sum();
  Var out = g.make(std::move(v), {1}, a.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = a.n;
    on->back = [on, an]() {
      ensure_grad(an);
      an->grad += 2.0f * on->grad(0) * value_of(an);
    };
  }
  return out;
}

// Softmax cross-entropy from logits, fused for stability.
inline Var cross_entropy_logits(Graph& g, Var logits, int target) {
  const Arr& z = logits.val();
  if (target < 0 || target >= z.size()) throw TrainError("cross_entropy: target out of range");
  const float m = z.maxCoeff();
  Arr p = (z - m).exp();
  const float denom = p.sum();
  p /= denom;
  Arr v(1);
  v(0) = std::log(denom) + m - z(target);
  Var out = g.make(std::move(v), {1}, logits.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *an = logits.n;
    Arr p_c = p;
    on->back = [on, an, p_c, target]() {
      ensure_grad(an);
      Arr d = p_c;
      d(target) -= 1.0f;
      an->grad += on->grad(0) * d;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops (2D nodes, row-major)
// ---------------------------------------------------------------------------

namespace detail {
inline void expect_2d(const Var& v, const char* op) {
  if (v.shape().size() != 2) throw TrainError(std::string(op) + ": expected 2-d node");
}
}  // namespace detail

// [m,k] x [k,n] -> [m,n]
inline Var matmul(Graph& g, Var a, Var b) {
  detail::expect_2d(a, "matmul");
  detail::expect_2d(b, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw TrainError("matmul: inner dim mismatch");
  CMapRM ma(a.val().data(), m, k), mb(b.val().data(), k, n);
  Arr v(static_cast<long>(m) * n);
  MapRM(v.data(), m, n).noalias() = ma * mb;
  const bool ng = a.n->needs_grad || b.n->needs_grad;
  Var out = g.make(std::move(v), {m, n}, ng);
  if (ng) {
    Node *on = out.n, *an = a.n, *bn = b.n;
    on->back = [on, an, bn, m, k, n]() {
      CMapRM go(on->grad.data(), m, n);
      if (an->needs_grad) {
        ensure_grad(an);
        CMapRM mb2(value_of(bn).data(), k, n);
        MapRM(an->grad.data(), m, k).noalias() += go * mb2.transpose();
      }
      if (bn->needs_grad) {
        ensure_grad(bn);
        CMapRM ma2(value_of(an).data(), m, k);
        MapRM(bn->grad.data(), k, n).noalias() += ma2.transpose() * go;
      }
    };
  }
  return out;
}

// [m,k] x [n,k]^T -> [m,n]
inline Var matmul_nt(Graph& g, Var a, Var b) {
  detail::expect_2d(a, "matmul_nt");
  detail::expect_2d(b, "matmul_nt");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) throw TrainError("matmul_nt: inner dim mismatch");
  CMapRM ma(a.val().data(), m, k), mb(b.val().data(), n, k);
  Arr v(static_cast<long>(m) * n);
  MapRM(v.data(), m, n).noalias() = ma * mb.transpose();
  const bool ng = a.n->needs_grad || b.n->needs_grad;
  Var out = g.make(std::move(v), {m, n}, ng);
  if (ng) {
    Node *on = out.n, *an = a.n, *bn = b.n;
    on->back = [on, an, bn, m, k, n]() {
      CMapRM go(on->grad.data(), m, n);
      if (an->needs_grad) {
        ensure_grad(an);
        CMapRM mb2(value_of(bn).data(), n, k);
        MapRM(an->grad.data(), m, k).noalias() += go * mb2;
      }
      if (bn->needs_grad) {
        ensure_grad(bn);
        CMapRM ma2(value_of(an).data(), m, k);
        MapRM(bn->grad.data(), n, k).noalias() += go.transpose() * ma2;
      }
    };
  }
  return out;
}

// W [o,i] times x [i] -> [o]
inline Var matvec(Graph& g, Var w, Var x) {
  detail::expect_2d(w, "matvec");
  const int o = w.shape()[0], i = w.shape()[1];
  if (x.size() != i) throw TrainError("matvec: dim mismatch");
  CMapRM mw(w.val().data(), o, i);
  Eigen::Map<const Eigen::VectorXf> vx(x.val().data(), i);
  Arr v(o);
  Eigen::Map<Eigen::VectorXf>(v.data(), o).noalias() = mw * vx;
  const bool ng = w.n->needs_grad || x.n->needs_grad;
  Var out = g.make(std::move(v), {o}, ng);
  if (ng) {
    Node *on = out.n, *wn = w.n, *xn = x.n;
    on->back = [on, wn, xn, o, i]() {
      Eigen::Map<const Eigen::VectorXf> go(on->grad.data(), o);
      if (wn->needs_grad) {
        ensure_grad(wn);
        Eigen::Map<const Eigen::VectorXf> vx2(value_of(xn).data(), i);
        MapRM(wn->grad.data(), o, i).noalias() += go * vx2.transpose();
      }
      if (xn->needs_grad) {
        ensure_grad(xn);
        CMapRM mw2(value_of(wn).data(), o, i);
        Eigen::Map<Eigen::VectorXf>(xn->grad.data(), i).noalias() += mw2.transpose() * go;
      }
    };
  }
  return out;
}

inline Var add_bias_rows(Graph& g, Var x, Var b) {
  detail::expect_2d(x, "add_bias_rows");
  const int n = x.shape()[0], d = x.shape()[1];
  if (b.size() != d) throw TrainError("add_bias_rows: dim mismatch");
  Arr v = x.val();
  MapRM mv(v.data(), n, d);
  mv.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.val().data(), d);
  const bool ng = x.n->needs_grad || b.n->needs_grad;
  Var out = g.make(std::move(v), x.shape(), ng);
  if (ng) {
    Node *on = out.n, *xn = x.n, *bn = b.n;
    on->back = [on, xn, bn, n, d]() {
      CMapRM go(on->grad.data(), n, d);
      if (xn->needs_grad) { ensure_grad(xn); xn->grad += on->grad; }
      if (bn->needs_grad) {
        ensure_grad(bn);
        Eigen::Map<Eigen::RowVectorXf>(bn->grad.data(), d) += go.colwise().sum();
      }
    };
  }
  return out;
}

inline Var softmax_rows(Graph& g, Var x) {
  detail::expect_2d(x, "softmax_rows");
  const int n = x.shape()[0], d = x.shape()[1];
  Arr v = x.val();
  MapRM mv(v.data(), n, d);
  for (int r = 0; r < n; ++r) {
    const float m = mv.row(r).maxCoeff();
    mv.row(r) = (mv.row(r).array() - m).exp();
    mv.row(r) /= mv.row(r).sum();
  }
  Var out = g.make(std::move(v), x.shape(), x.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *xn = x.n;
    on->back = [on, xn, n, d]() {
      ensure_grad(xn);
      CMapRM y(value_of(on).data(), n, d);
      CMapRM go(on->grad.data(), n, d);
      MapRM gx(xn->grad.data(), n, d);
      for (int r = 0; r < n; ++r) {
        const float dot = (go.row(r).array() * y.row(r).array()).sum();
        gx.row(r).array() += y.row(r).array() * (go.row(r).array() - dot);
      }
    };
  }
  return out;
}

inline Var slice_rows(Graph& g, Var x, int off, int count) {
  detail::expect_2d(x, "slice_rows");
  const int n = x.shape()[0], d = x.shape()[1];
  if (off < 0 || off + count > n) throw TrainError("slice_rows: out of range");
  Arr v = x.val().segment(static_cast<long>(off) * d, static_cast<long>(count) * d);
  Var out = g.make(std::move(v), {count, d}, x.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *xn = x.n;
    on->back = [on, xn, off, count, d]() {
      ensure_grad(xn);
      xn->grad.segment(static_cast<long>(off) * d, static_cast<long>(count) * d) += on->grad;
    };
  }
  return out;
}

inline Var concat_rows(Graph& g, Var a, Var b) {
  detail::expect_2d(a, "concat_rows");
  detail::expect_2d(b, "concat_rows");
  const int d = a.shape()[1];
  if (b.shape()[1] != d) throw TrainError("concat_rows: width mismatch");
  const int na = a.shape()[0], nb = b.shape()[0];
  Arr v(static_cast<long>(na + nb) * d);
  v.head(static_cast<long>(na) * d) = a.val();
  v.tail(static_cast<long>(nb) * d) = b.val();
  const bool ng = a.n->needs_grad || b.n->needs_grad;
  Var out = g.make(std::move(v), {na + nb, d}, ng);
  if (ng) {
    Node *on = out.n, *an = a.n, *bn = b.n;
    on->back = [on, an, bn, na, nb, d]() {
      if (an->needs_grad) {
        ensure_grad(an);
        an->grad += on->grad.head(static_cast<long>(na) * d);
      }
      if (bn->needs_grad) {
        ensure_grad(bn);
        bn->grad += on->grad.tail(static_cast<long>(nb) * d);
      }
    };
  }
  return out;
}

inline Var slice_cols(Graph& g, Var x, int off, int count) {
  detail::expect_2d(x, "slice_cols");
  const int n = x.shape()[0], d = x.shape()[1];
  if (off < 0 || off + count > d) throw TrainError("slice_cols: out of range");
  Arr v(static_cast<long>(n) * count);
  CMapRM mx(x.val().data(), n, d);
  MapRM(v.data(), n, count) = mx.middleCols(off, count);
  Var out = g.make(std::move(v), {n, count}, x.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *xn = x.n;
    on->back = [on, xn, n, d, off, count]() {
      ensure_grad(xn);
      MapRM gx(xn->grad.data(), n, d);
      CMapRM go(on->grad.data(), n, count);
      gx.middleCols(off, count) += go;
    };
  }
  return out;
}

inline Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw TrainError("concat_cols: empty");
  const int n = parts[0].shape()[0];
  int d = 0;
  for (const auto& p : parts) {
    detail::expect_2d(p, "concat_cols");
    if (p.shape()[0] != n) throw TrainError("concat_cols: height mismatch");
    d += p.shape()[1];
  }
  Arr v(static_cast<long>(n) * d);
  MapRM mv(v.data(), n, d);
  bool ng = false;
  int off = 0;
  for (const auto& p : parts) {
    mv.middleCols(off, p.shape()[1]) = CMapRM(p.val().data(), n, p.shape()[1]);
    off += p.shape()[1];
    ng = ng || p.n->needs_grad;
  }
  Var out = g.make(std::move(v), {n, d}, ng);
  if (ng) {
    Node* on = out.n;
    std::vector<Node*> pn;
    std::vector<int> widths;
    for (const auto& p : parts) {
      pn.push_back(p.n);
      widths.push_back(p.shape()[1]);
    }
    on->back = [on, pn, widths, n, d]() {
      CMapRM go(on->grad.data(), n, d);
      int off2 = 0;
      for (size_t i = 0; i < pn.size(); ++i) {
        if (pn[i]->needs_grad) {
          ensure_grad(pn[i]);
          MapRM(pn[i]->grad.data(), n, widths[i]) += go.middleCols(off2, widths[i]);
        }
        off2 += widths[i];
      }
    };
  }
  return out;
}

inline Var transpose2d(Graph& g, Var x) {
  detail::expect_2d(x, "transpose2d");
  const int m = x.shape()[0], n = x.shape()[1];
  Arr v(x.size());
  MapRM(v.data(), n, m) = CMapRM(x.val().data(), m, n).transpose();
  Var out = g.make(std::move(v), {n, m}, x.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *xn = x.n;
    on->back = [on, xn, m, n]() {
      ensure_grad(xn);
      MapRM(xn->grad.data(), m, n) += CMapRM(on->grad.data(), n, m).transpose();
    };
  }
  return out;
}

// Rows of a [N,D] table selected by index; backward scatter-adds.
inline Var gather_rows(Graph& g, Var table, const std::vector<int>& idx) {
  detail::expect_2d(table, "gather_rows");
  const int n = table.shape()[0], d = table.shape()[1];
  Arr v(static_cast<long>(idx.size()) * d);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw TrainError("gather_rows: index out of range");
    v.segment(static_cast<long>(i) * d, d) =
        table.val().segment(static_cast<long>(idx[i]) * d, d);
  }
  Var out = g.make(std::move(v), {static_cast<int>(idx.size()), d}, table.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *tn = table.n;
    std::vector<int> idx_c = idx;
    on->back = [on, tn, idx_c, d]() {
      ensure_grad(tn);
      for (size_t i = 0; i < idx_c.size(); ++i)
        tn->grad.segment(static_cast<long>(idx_c[i]) * d, d) +=
            on->grad.segment(static_cast<long>(i) * d, d);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM) and spatial ops on [C,H,W] nodes
// ---------------------------------------------------------------------------

namespace detail {

inline MatRM im2col(const float* x, int c_in, int h, int w, int k, int stride, int pad,
                    int& h_out, int& w_out) {
  h_out = (h + 2 * pad - k) / stride + 1;
  w_out = (w + 2 * pad - k) / stride + 1;
  MatRM col(c_in * k * k, h_out * w_out);
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int row = (c * k + ky) * k + kx;
        for (int oy = 0; oy < h_out; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < w_out; ++ox) {
            const int ix = ox * stride + kx - pad;
            col(row, oy * w_out + ox) =
                (iy >= 0 && iy < h && ix >= 0 && ix < w)
                    ? x[(static_cast<long>(c) * h + iy) * w + ix]
                    : 0.0f;
          }
        }
      }
  return col;
}

inline void col2im_add(const MatRM& col, float* gx, int c_in, int h, int w, int k,
                       int stride, int pad, int h_out, int w_out) {
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int row = (c * k + ky) * k + kx;
        for (int oy = 0; oy < h_out; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < w_out; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            gx[(static_cast<long>(c) * h + iy) * w + ix] += col(row, oy * w_out + ox);
          }
        }
      }
}

}  // namespace detail

// x [Cin,H,W], w [Cout, Cin*k*k], b [Cout] -> [Cout,Ho,Wo]
inline Var conv2d(Graph& g, Var x, Var w, Var b, int k, int stride, int pad) {
  if (x.shape().size() != 3) throw TrainError("conv2d: expected [C,H,W] input");
  const int c_in = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int c_out = w.shape()[0];
  if (w.shape()[1] != c_in * k * k) throw TrainError("conv2d: weight shape mismatch");
  if (b.size() != c_out) throw TrainError("conv2d: bias shape mismatch");
  int h_out = 0, w_out = 0;
  MatRM col = detail::im2col(x.val().data(), c_in, h, wd, k, stride, pad, h_out, w_out);
  CMapRM mw(w.val().data(), c_out, c_in * k * k);
  Arr v(static_cast<long>(c_out) * h_out * w_out);
  MapRM mv(v.data(), c_out, h_out * w_out);
  mv.noalias() = mw * col;
  mv.colwise() += Eigen::Map<const Eigen::VectorXf>(b.val().data(), c_out);
  const bool ng = x.n->needs_grad || w.n->needs_grad || b.n->needs_grad;
  Var out = g.make(std::move(v), {c_out, h_out, w_out}, ng);
  if (ng) {
    Node *on = out.n, *xn = x.n, *wn = w.n, *bn = b.n;
    auto col_p = std::make_shared<MatRM>(std::move(col));
    on->back = [on, xn, wn, bn, col_p, c_in, h, wd, c_out, k, stride, pad, h_out, w_out]() {
      CMapRM go(on->grad.data(), c_out, h_out * w_out);
      if (bn->needs_grad) {
        ensure_grad(bn);
        Eigen::Map<Eigen::VectorXf>(bn->grad.data(), c_out) += go.rowwise().sum();
      }
      if (wn->needs_grad) {
        ensure_grad(wn);
        MapRM(wn->grad.data(), c_out, c_in * k * k).noalias() += go * col_p->transpose();
      }
      if (xn->needs_grad) {
        ensure_grad(xn);
        CMapRM mw2(value_of(wn).data(), c_out, c_in * k * k);
        MatRM gcol = mw2.transpose() * go;
        detail::col2im_add(gcol, xn->grad.data(), c_in, h, wd, k, stride, pad, h_out, w_out);
      }
    };
  }
  return out;
}

inline Var upsample_nearest2x(Graph& g, Var x) {
  if (x.shape().size() != 3) throw TrainError("upsample: expected [C,H,W]");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Arr v(static_cast<long>(c) * 4 * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        v[(static_cast<long>(ch) * 2 * h + y) * 2 * w + xx] =
            x.val()[(static_cast<long>(ch) * h + y / 2) * w + xx / 2];
  Var out = g.make(std::move(v), {c, 2 * h, 2 * w}, x.n->needs_grad);
  if (out.n->needs_grad) {
    Node *on = out.n, *xn = x.n;
    on->back = [on, xn, c, h, w]() {
      ensure_grad(xn);
      for (int ch2 = 0; ch2 < c; ++ch2)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx)
            xn->grad[(static_cast<long>(ch2) * h + y / 2) * w + xx / 2] +=
                on->grad[(static_cast<long>(ch2) * 2 * h + y) * 2 * w + xx];
    };
  }
  return out;
}

inline Var add_bias_chw(Graph& g, Var x, Var b) {
  if (x.shape().size() != 3) throw TrainError("add_bias_chw: expected [C,H,W]");
  const int c = x.shape()[0];
  const long hw = static_cast<long>(x.shape()[1]) * x.shape()[2];
  if (b.size() != c) throw TrainError("add_bias_chw: dim mismatch");
  Arr v = x.val();
  for (int ch = 0; ch < c; ++ch) v.segment(ch * hw, hw) += b.val()(ch);
  const bool ng = x.n->needs_grad || b.n->needs_grad;
  Var out = g.make(std::move(v), x.shape(), ng);
  if (ng) {
    Node *on = out.n, *xn = x.n, *bn = b.n;
    on->back = [on, xn, bn, c, hw]() {
      if (xn->needs_grad) { ensure_grad(xn); xn->grad += on->grad; }
      if (bn->needs_grad) {
        ensure_grad(bn);
        for (int ch2 = 0; ch2 < c; ++ch2)
          bn->grad(ch2) += on->grad.segment(ch2 * hw, hw).sum();
      }
    };
  }
  return out;
}

// FiLM conditioning: y = x * (1 + s_c) + t_c per channel; s,t are vectors.
inline Var film_chw(Graph& g, Var x, Var s, Var t) {
  if (x.shape().size() != 3) throw TrainError("film_chw: expected [C,H,W]");
  const int c = x.shape()[0];
  const long hw = static_cast<long>(x.shape()[1]) * x.shape()[2];
  if (s.size() != c || t.size() != c) throw TrainError("film_chw: dim mismatch");
  Arr v = x.val();
  for (int ch = 0; ch < c; ++ch)
    v.segment(ch * hw, hw) = v.segment(ch * hw, hw) * (1.0f + s.val()(ch)) + t.val()(ch);
  const bool ng = x.n->needs_grad || s.n->needs_grad || t.n->needs_grad;
  Var out = g.make(std::move(v), x.shape(), ng);
  if (ng) {
    Node *on = out.n, *xn = x.n, *sn = s.n, *tn = t.n;
    on->back = [on, xn, sn, tn, c, hw]() {
      for (int ch2 = 0; ch2 < c; ++ch2) {
        const auto seg = on->grad.segment(ch2 * hw, hw);
        if (xn->needs_grad) {
          ensure_grad(xn);
          xn->grad.segment(ch2 * hw, hw) += seg * (1.0f + value_of(sn)(ch2));
        }
        if (sn->needs_grad) {
          ensure_grad(sn);
          sn->grad(ch2) += (seg * value_of(xn).segment(ch2 * hw, hw)).sum();
        }
        if (tn->needs_grad) {
          ensure_grad(tn);
          tn->grad(ch2) += seg.sum();
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

inline Var group_norm(Graph& g, Var x, int groups, Var gamma, Var beta, float eps = 1e-5f) {
  if (x.shape().size() != 3) throw TrainError("group_norm: expected [C,H,W]");
  const int c = x.shape()[0];
  const long hw = static_cast<long>(x.shape()[1]) * x.shape()[2];
  if (c % groups != 0) throw TrainError("group_norm: channels not divisible by groups");
  if (gamma.size() != c || beta.size() != c) throw TrainError("group_norm: affine dim mismatch");
  const int cpg = c / groups;
  const long npg = cpg * hw;

  Arr xhat(x.size());
  std::vector<float> inv_std(static_cast<size_t>(groups));
  Arr v(x.size());
  for (int gr = 0; gr < groups; ++gr) {
    const auto seg = x.val().segment(gr * npg, npg);
    const float mu = seg.mean();
    const float var = (seg - mu).square().mean();
    const float is = 1.0f / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(gr)] = is;
    xhat.segment(gr * npg, npg) = (seg - mu) * is;
  }
  for (int ch = 0; ch < c; ++ch)
    v.segment(ch * hw, hw) = xhat.segment(ch * hw, hw) * gamma.val()(ch) + beta.val()(ch);
  const bool ng = x.n->needs_grad || gamma.n->needs_grad || beta.n->needs_grad;
  Var out = g.make(std::move(v), x.shape(), ng);
  if (ng) {
    Node *on = out.n, *xn = x.n, *gn = gamma.n, *bn = beta.n;
    auto xhat_p = std::make_shared<Arr>(std::move(xhat));
    auto is_p = std::make_shared<std::vector<float>>(std::move(inv_std));
    on->back = [on, xn, gn, bn, xhat_p, is_p, groups, cpg, hw, npg]() {
      for (int gr2 = 0; gr2 < groups; ++gr2) {
        const auto xh = xhat_p->segment(gr2 * npg, npg);
        if (gn->needs_grad || bn->needs_grad) {
          for (int j = 0; j < cpg; ++j) {
            const int ch2 = gr2 * cpg + j;
            const auto gch = on->grad.segment(static_cast<long>(ch2) * hw, hw);
            const auto xch = xhat_p->segment(static_cast<long>(ch2) * hw, hw);
            if (gn->needs_grad) { ensure_grad(gn); gn->grad(ch2) += (gch * xch).sum(); }
            if (bn->needs_grad) { ensure_grad(bn); bn->grad(ch2) += gch.sum(); }
          }
        }
        if (xn->needs_grad) {
          ensure_grad(xn);
          // Scale upstream grad by gamma per channel first.
          Arr t(npg);
          for (int j = 0; j < cpg; ++j) {
            const int ch2 = gr2 * cpg + j;
            t.segment(static_cast<long>(j) * hw, hw) =
                on->grad.segment(static_cast<long>(ch2) * hw, hw) * value_of(gn)(ch2);
          }
          const float mean_t = t.mean();
          const float mean_tx = (t * xh).mean();
          xn->grad.segment(gr2 * npg, npg) +=
              (*is_p)[static_cast<size_t>(gr2)] * (t - mean_t - xh * mean_tx);
        }
      }
    };
  }
  return out;
}

inline Var layer_norm_rows(Graph& g, Var x, Var gamma, Var beta, float eps = 1e-5f) {
  detail::expect_2d(x, "layer_norm_rows");
  const int n = x.shape()[0], d = x.shape()[1];
  if (gamma.size() != d || beta.size() != d) throw TrainError("layer_norm: affine dim mismatch");
  Arr xhat(x.size());
  std::vector<float> inv_std(static_cast<size_t>(n));
  Arr v(x.size());
  for (int r = 0; r < n; ++r) {
    const auto seg = x.val().segment(static_cast<long>(r) * d, d);
    const float mu = seg.mean();
    const float var = (seg - mu).square().mean();
    const float is = 1.0f / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    xhat.segment(static_cast<long>(r) * d, d) = (seg - mu) * is;
    v.segment(static_cast<long>(r) * d, d) =
        xhat.segment(static_cast<long>(r) * d, d) * gamma.val() + beta.val();
  }
  const bool ng = x.n->needs_grad || gamma.n->needs_grad || beta.n->needs_grad;
  Var out = g.make(std::move(v), x.shape(), ng);
  if (ng) {
    Node *on = out.n, *xn = x.n, *gn = gamma.n, *bn = beta.n;
    auto xhat_p = std::make_shared<Arr>(std::move(xhat));
    auto is_p = std::make_shared<std::vector<float>>(std::move(inv_std));
    on->back = [on, xn, gn, bn, xhat_p, is_p, n, d]() {
      for (int r = 0; r < n; ++r) {
        const auto go = on->grad.segment(static_cast<long>(r) * d, d);
        const auto xh = xhat_p->segment(static_cast<long>(r) * d, d);
        if (gn->needs_grad) { ensure_grad(gn); gn->grad += go * xh; }
        if (bn->needs_grad) { ensure_grad(bn); bn->grad += go; }
        if (xn->needs_grad) {
          ensure_grad(xn);
          Arr t = go * value_of(gn);
          const float mean_t = t.mean();
          const float mean_tx = (t * xh).mean();
          xn->grad.segment(static_cast<long>(r) * d, d) +=
              (*is_p)[static_cast<size_t>(r)] * (t - mean_t - xh * mean_tx);
        }
      }
    };
  }
  return out;
}

}  // namespace tilediff::nn
