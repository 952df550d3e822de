// SPDX-License-Identifier: Apache-2.0
//
// Layer wrappers, initializers, AdamW with cosine decay, and early stopping.
// Layers hold Param pointers into a ParamStore; applying a layer records ops
// on the caller's Graph.

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "tilediff/autodiff.hpp"
#include "tilediff/common.hpp"

namespace tilediff::nn {

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

inline void fill_normal(Rng& rng, Arr& a, float std) {
  for (long i = 0; i < a.size(); ++i) a(i) = std * rng.normalf();
}

inline void init_kaiming(Rng& rng, Param& p, long fan_in) {
  fill_normal(rng, p.value, std::sqrt(2.0f / static_cast<float>(fan_in)));
}

inline void init_xavier(Rng& rng, Param& p, long fan_in, long fan_out) {
  fill_normal(rng, p.value, std::sqrt(2.0f / static_cast<float>(fan_in + fan_out)));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Linear {
  Param* w = nullptr;  // [out, in]
  Param* b = nullptr;  // [out]
  int in = 0, out = 0;

  static Linear create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                       float gain = 1.0f) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w = &ps.create(name + ".w", {out, in});
    l.b = &ps.create(name + ".b", {out});
    fill_normal(rng, l.w->value, gain * std::sqrt(2.0f / static_cast<float>(in)));
    return l;
  }

  Var operator()(Graph& g, Var x) const {
    if (x.shape().size() == 1) return add(g, matvec(g, g.param(*w), x), g.param(*b));
    return add_bias_rows(g, matmul_nt(g, x, g.param(*w)), g.param(*b));
  }
};

struct Conv {
  Param* w = nullptr;  // [c_out, c_in*k*k]
  Param* b = nullptr;  // [c_out]
  int c_in = 0, c_out = 0, k = 3, stride = 1, pad = 1;

  static Conv create(ParamStore& ps, const std::string& name, int c_in, int c_out, int k,
                     int stride, int pad, Rng& rng, float gain = 1.0f) {
    Conv c;
    c.c_in = c_in;
    c.c_out = c_out;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    c.w = &ps.create(name + ".w", {c_out, c_in * k * k});
    c.b = &ps.create(name + ".b", {c_out});
    fill_normal(rng, c.w->value, gain * std::sqrt(2.0f / static_cast<float>(c_in * k * k)));
    return c;
  }

  Var operator()(Graph& g, Var x) const {
    return conv2d(g, x, g.param(*w), g.param(*b), k, stride, pad);
  }
};

struct GroupNormLayer {
  Param* gamma = nullptr;
  Param* beta = nullptr;
  int groups = 8;

  static GroupNormLayer create(ParamStore& ps, const std::string& name, int channels,
                               int groups) {
    GroupNormLayer l;
    l.groups = groups;
    l.gamma = &ps.create(name + ".gamma", {channels});
    l.beta = &ps.create(name + ".beta", {channels});
    l.gamma->value.setOnes();
    return l;
  }

  Var operator()(Graph& g, Var x) const {
    return group_norm(g, x, groups, g.param(*gamma), g.param(*beta));
  }
};

struct LayerNormLayer {
  Param* gamma = nullptr;
  Param* beta = nullptr;

  static LayerNormLayer create(ParamStore& ps, const std::string& name, int dim) {
    LayerNormLayer l;
    l.gamma = &ps.create(name + ".gamma", {dim});
    l.beta = &ps.create(name + ".beta", {dim});
    l.gamma->value.setOnes();
    return l;
  }

  Var operator()(Graph& g, Var x) const {
    return layer_norm_rows(g, x, g.param(*gamma), g.param(*beta));
  }
};

// Multi-head attention over row-token matrices. Self-attention passes x as
// its own context.
struct Attention {
  int dim = 0, heads = 1;
  Linear wq, wk, wv, wo;

  static Attention create(ParamStore& ps, const std::string& name, int dim, int heads,
                          Rng& rng) {
    if (dim % heads != 0) throw TrainError("attention dim not divisible by heads");
    Attention a;
    a.dim = dim;
    a.heads = heads;
    a.wq = Linear::create(ps, name + ".q", dim, dim, rng, 0.5f);
    a.wk = Linear::create(ps, name + ".k", dim, dim, rng, 0.5f);
    a.wv = Linear::create(ps, name + ".v", dim, dim, rng, 0.5f);
    a.wo = Linear::create(ps, name + ".o", dim, dim, rng, 0.5f);
    return a;
  }

  Var operator()(Graph& g, Var x, Var ctx) const {
    const int dh = dim / heads;
    Var q = wq(g, x), k = wk(g, ctx), v = wv(g, ctx);
    std::vector<Var> outs;
    outs.reserve(static_cast<size_t>(heads));
    const float s = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int h = 0; h < heads; ++h) {
      Var qh = slice_cols(g, q, h * dh, dh);
      Var kh = slice_cols(g, k, h * dh, dh);
      Var vh = slice_cols(g, v, h * dh, dh);
      Var att = softmax_rows(g, scale(g, matmul_nt(g, qh, kh), s));
      outs.push_back(matmul(g, att, vh));
    }
    return wo(g, concat_cols(g, outs));
  }
};

struct Mlp {
  Linear fc1, fc2;

  static Mlp create(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng) {
    Mlp m;
    m.fc1 = Linear::create(ps, name + ".fc1", dim, hidden, rng);
    m.fc2 = Linear::create(ps, name + ".fc2", hidden, dim, rng);
    return m;
  }

  Var operator()(Graph& g, Var x) const { return fc2(g, gelu(g, fc1(g, x))); }
};

// ---------------------------------------------------------------------------
// Optimizer and schedules
// ---------------------------------------------------------------------------

// Decoupled weight decay: decay is applied to the parameter directly, not
// mixed into the gradient moments.
struct AdamW {
  float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  float weight_decay = 0.0f;
  long t = 0;

  void step(ParamStore& ps, float lr) {
    ++t;
    const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t));
    const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t));
    for (const auto& p : ps.all()) {
      p->m = beta1 * p->m + (1.0f - beta1) * p->grad;
      p->v = beta2 * p->v + (1.0f - beta2) * p->grad.square();
      p->value -= lr * ((p->m / bc1) / ((p->v / bc2).sqrt() + eps) + weight_decay * p->value);
    }
  }
};

struct CosineSchedule {
  float base_lr = 1e-4f;
  long total_steps = 1;
  long warmup_steps = 0;
  float min_lr = 0.0f;

  float lr_at(long step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return base_lr * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
    const long span = std::max(1l, total_steps - warmup_steps);
    double frac = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    frac = std::clamp(frac, 0.0, 1.0);
    return min_lr + (base_lr - min_lr) * 0.5f * static_cast<float>(1.0 + std::cos(M_PI * frac));
  }
};

// ---------------------------------------------------------------------------
// Early stopping on a maximized validation metric, with best-weight restore
// ---------------------------------------------------------------------------

class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  // Returns true once patience is exhausted. Equal-or-worse epochs consume
  // patience; strict improvement resets it and snapshots the weights.
  bool update(double metric, const ParamStore& ps) {
    if (metric > best_) {
      best_ = metric;
      since_ = 0;
      snapshot_.clear();
      for (const auto& p : ps.all()) snapshot_.push_back(p->value);
      return false;
    }
    return ++since_ >= patience_;
  }

  double best() const { return best_; }
  bool has_snapshot() const { return !snapshot_.empty(); }

  void restore(ParamStore& ps) const {
    if (snapshot_.empty()) return;
    if (snapshot_.size() != ps.all().size())
      throw TrainError("early stopper snapshot does not match param store");
    for (size_t i = 0; i < snapshot_.size(); ++i) ps.all()[i]->value = snapshot_[i];
  }

 private:
  int patience_;
  int since_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
  std::vector<Arr> snapshot_;
};

}  // namespace tilediff::nn
