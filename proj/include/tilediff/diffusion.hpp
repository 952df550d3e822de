// SPDX-License-Identifier: Apache-2.0
//
// Conditional latent diffusion: linear-beta DDPM schedule, a small U-Net
// with FiLM time conditioning and one cross-attention block over three
// condition tokens (frozen tile embedding, cohort, tissue preparation),
// epsilon-prediction training with condition dropout, and a strided
// ancestral sampler with classifier-free guidance.
//
// The sampler uses the eta=1 DDIM parameterization, which is algebraically
// identical to DDPM ancestral sampling when every timestep is visited and
// degrades gracefully under stride.

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tilediff/common.hpp"
#include "tilediff/corpus.hpp"
#include "tilediff/embedder.hpp"
#include "tilediff/nn.hpp"

namespace tilediff::diffusion {

using nn::Arr;
using nn::Graph;
using nn::Var;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
  int timesteps = 0;
  std::vector<double> beta, alpha, alpha_bar;

  static NoiseSchedule linear(int timesteps = 1000, double beta_start = 1e-4,
                              double beta_end = 0.02) {
    if (timesteps < 2) throw ConfigError("noise schedule needs >= 2 timesteps");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
      throw ConfigError("noise schedule betas must satisfy 0 < start <= end < 1");
    NoiseSchedule ns;
    ns.timesteps = timesteps;
    ns.beta.resize(static_cast<size_t>(timesteps));
    ns.alpha.resize(static_cast<size_t>(timesteps));
    ns.alpha_bar.resize(static_cast<size_t>(timesteps));
    double prod = 1.0;
    for (int t = 0; t < timesteps; ++t) {
      const double b =
          beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                           static_cast<double>(timesteps - 1);
      ns.beta[static_cast<size_t>(t)] = b;
      ns.alpha[static_cast<size_t>(t)] = 1.0 - b;
      prod *= 1.0 - b;
      ns.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return ns;
  }

  // z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
  Arr forward_sample(const Arr& z0, int t, const Arr& eps) const {
    if (t < 0 || t >= timesteps) throw DataError("forward_sample: t out of range");
    if (z0.size() != eps.size()) throw DataError("forward_sample: size mismatch");
    const auto ab = alpha_bar[static_cast<size_t>(t)];
    return static_cast<float>(std::sqrt(ab)) * z0 +
           static_cast<float>(std::sqrt(1.0 - ab)) * eps;
  }
};

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

struct TileCondition {
  Eigen::VectorXf embedding;  // frozen tile embedding
  int cohort = 0;             // corpus::Cohort
  int prep = 0;               // corpus::TissuePrep
};

inline TileCondition make_condition(const Image& img, corpus::Cohort cohort,
                                    corpus::TissuePrep prep) {
  TileCondition c;
  c.embedding = embedder::embed(img).values;
  c.cohort = static_cast<int>(cohort);
  c.prep = static_cast<int>(prep);
  return c;
}

// ---------------------------------------------------------------------------
// Latent standardization (diffusion runs in normalized latent space)
// ---------------------------------------------------------------------------

struct LatentStats {
  Arr mean, stdev;  // per channel

  static LatentStats compute(const std::vector<Arr>& latents, int channels) {
    if (latents.empty()) throw DataError("LatentStats: no latents");
    const long hw = latents[0].size() / channels;
    LatentStats s;
    s.mean = Arr::Zero(channels);
    s.stdev = Arr::Zero(channels);
    const double n = static_cast<double>(latents.size()) * static_cast<double>(hw);
    for (const auto& z : latents)
      for (int c = 0; c < channels; ++c)
        s.mean(c) += z.segment(static_cast<long>(c) * hw, hw).sum() / static_cast<float>(n);
    for (const auto& z : latents)
      for (int c = 0; c < channels; ++c)
        s.stdev(c) +=
            (z.segment(static_cast<long>(c) * hw, hw) - s.mean(c)).square().sum() /
            static_cast<float>(n);
    s.stdev = s.stdev.sqrt().max(1e-4f);
    return s;
  }

  Arr apply(const Arr& z) const {
    const long hw = z.size() / mean.size();
    Arr out(z.size());
    for (long c = 0; c < mean.size(); ++c)
      out.segment(c * hw, hw) = (z.segment(c * hw, hw) - mean(c)) / stdev(c);
    return out;
  }

  Arr invert(const Arr& z) const {
    const long hw = z.size() / mean.size();
    Arr out(z.size());
    for (long c = 0; c < mean.size(); ++c)
      out.segment(c * hw, hw) = z.segment(c * hw, hw) * stdev(c) + mean(c);
    return out;
  }

  nlohmann::json to_json() const {
    std::vector<float> m(mean.data(), mean.data() + mean.size());
    std::vector<float> s(stdev.data(), stdev.data() + stdev.size());
    return {{"mean", m}, {"stdev", s}};
  }

  static LatentStats from_json(const nlohmann::json& j) {
    LatentStats s;
    const auto m = j.at("mean").get<std::vector<float>>();
    const auto sd = j.at("stdev").get<std::vector<float>>();
    s.mean = Eigen::Map<const Arr>(m.data(), static_cast<long>(m.size()));
    s.stdev = Eigen::Map<const Arr>(sd.data(), static_cast<long>(sd.size()));
    return s;
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct LdmConfig {
  int latent_channels = 3;
  int latent_size = 16;
  int base_width = 64;    // first-stage channels; second stage doubles
  int time_dim = 128;     // sinusoidal + MLP width
  int ctx_dim = 64;       // condition token width
  int attn_heads = 4;
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  uint64_t init_seed = 2;

  void validate() const {
    if (latent_size < 4 || latent_size % 2 != 0)
      throw ConfigError("ldm latent_size must be even, >= 4");
    if (base_width < 8 || base_width % 8 != 0)
      throw ConfigError("ldm base_width must be a positive multiple of 8");
    if (time_dim % 2 != 0) throw ConfigError("ldm time_dim must be even");
    if (ctx_dim % attn_heads != 0)
      throw ConfigError("ldm ctx_dim must be divisible by attn_heads");
    if (timesteps < 2) throw ConfigError("ldm timesteps must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const LdmConfig& c) {
  j = {{"latent_channels", c.latent_channels}, {"latent_size", c.latent_size},
       {"base_width", c.base_width},           {"time_dim", c.time_dim},
       {"ctx_dim", c.ctx_dim},                 {"attn_heads", c.attn_heads},
       {"timesteps", c.timesteps},             {"beta_start", c.beta_start},
       {"beta_end", c.beta_end},               {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, LdmConfig& c) {
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.latent_size = j.value("latent_size", c.latent_size);
  c.base_width = j.value("base_width", c.base_width);
  c.time_dim = j.value("time_dim", c.time_dim);
  c.ctx_dim = j.value("ctx_dim", c.ctx_dim);
  c.attn_heads = j.value("attn_heads", c.attn_heads);
  c.timesteps = j.value("timesteps", c.timesteps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.init_seed = j.value("init_seed", c.init_seed);
}

namespace detail {

struct ResBlock {
  nn::GroupNormLayer gn1, gn2;
  nn::Conv conv1, conv2, skip;
  nn::Linear film;
  bool project = false;
  int c_out = 0;

  static ResBlock create(nn::ParamStore& ps, const std::string& name, int c_in, int c_out,
                         int t_dim, Rng& rng) {
    ResBlock b;
    b.c_out = c_out;
    b.gn1 = nn::GroupNormLayer::create(ps, name + ".gn1", c_in, std::min(8, c_in));
    b.conv1 = nn::Conv::create(ps, name + ".conv1", c_in, c_out, 3, 1, 1, rng);
    b.gn2 = nn::GroupNormLayer::create(ps, name + ".gn2", c_out, std::min(8, c_out));
    b.conv2 = nn::Conv::create(ps, name + ".conv2", c_out, c_out, 3, 1, 1, rng, 0.5f);
    b.film = nn::Linear::create(ps, name + ".film", t_dim, 2 * c_out, rng, 0.5f);
    b.project = c_in != c_out;
    if (b.project) b.skip = nn::Conv::create(ps, name + ".skip", c_in, c_out, 1, 1, 0, rng);
    return b;
  }

  Var apply(Graph& g, Var x, Var temb) const {
    Var h = conv1(g, nn::silu(g, gn1(g, x)));
    Var st = film(g, temb);  // [2*c_out]
    Var st2 = nn::reshape(g, st, {2, c_out});
    Var s = nn::reshape(g, nn::slice_rows(g, st2, 0, 1), {c_out});
    Var t = nn::reshape(g, nn::slice_rows(g, st2, 1, 1), {c_out});
    h = nn::film_chw(g, h, s, t);
    h = conv2(g, nn::silu(g, gn2(g, h)));
    Var res = project ? skip(g, x) : x;
    return nn::add(g, res, h);
  }
};

// Cross-attention from feature-map positions (queries) to the three
// condition tokens (keys/values).
struct CrossBlock {
  nn::GroupNormLayer gn;
  nn::Linear wq, wk, wv, wo;
  int heads = 1, width = 0;

  static CrossBlock create(nn::ParamStore& ps, const std::string& name, int width,
                           int ctx_dim, int heads, Rng& rng) {
    CrossBlock b;
    b.heads = heads;
    b.width = width;
    b.gn = nn::GroupNormLayer::create(ps, name + ".gn", width, std::min(8, width));
    b.wq = nn::Linear::create(ps, name + ".q", width, width, rng, 0.5f);
    b.wk = nn::Linear::create(ps, name + ".k", ctx_dim, width, rng, 0.5f);
    b.wv = nn::Linear::create(ps, name + ".v", ctx_dim, width, rng, 0.5f);
    b.wo = nn::Linear::create(ps, name + ".o", width, width, rng, 0.25f);
    return b;
  }

  Var apply(Graph& g, Var x, Var ctx) const {
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int hw = h * w;
    Var xr = nn::transpose2d(g, nn::reshape(g, gn(g, x), {c, hw}));  // [hw, c]
    Var q = wq(g, xr), k = wk(g, ctx), v = wv(g, ctx);
    const int dh = width / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Var> outs;
    for (int hd = 0; hd < heads; ++hd) {
      Var qh = nn::slice_cols(g, q, hd * dh, dh);
      Var kh = nn::slice_cols(g, k, hd * dh, dh);
      Var vh = nn::slice_cols(g, v, hd * dh, dh);
      Var att = nn::softmax_rows(g, nn::scale(g, nn::matmul_nt(g, qh, kh), sc));
      outs.push_back(nn::matmul(g, att, vh));
    }
    Var y = wo(g, nn::concat_cols(g, outs));
    Var y_chw = nn::reshape(g, nn::transpose2d(g, y), {c, h, w});
    return nn::add(g, x, y_chw);
  }
};

inline Var concat_chw(Graph& g, Var a, Var b) {
  const int ca = a.shape()[0], cb = b.shape()[0];
  const int h = a.shape()[1], w = a.shape()[2];
  Var ar = nn::reshape(g, a, {ca, h * w});
  Var br = nn::reshape(g, b, {cb, h * w});
  return nn::reshape(g, nn::concat_rows(g, ar, br), {ca + cb, h, w});
}

inline Arr sinusoidal_embedding(int t, int dim) {
  Arr e(dim);
  const int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(k) / std::max(1, half - 1));
    e(k) = static_cast<float>(std::sin(t * freq));
    e(half + k) = static_cast<float>(std::cos(t * freq));
  }
  return e;
}

}  // namespace detail

class Ldm {
 public:
  explicit Ldm(const LdmConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.init_seed, "ldm_init"));
    const int w0 = cfg.base_width, w1 = 2 * cfg.base_width;
    const int td = cfg.time_dim;
    tmlp1_ = nn::Linear::create(ps_, "tmlp1", td, td, rng);
    tmlp2_ = nn::Linear::create(ps_, "tmlp2", td, td, rng);
    emb_proj_ = nn::Linear::create(ps_, "emb_proj", embedder::kDim, cfg.ctx_dim, rng);
    cohort_table_ = &ps_.create("cohort_table", {2, cfg.ctx_dim});
    prep_table_ = &ps_.create("prep_table", {2, cfg.ctx_dim});
    null_tokens_ = &ps_.create("null_tokens", {3, cfg.ctx_dim});
    nn::fill_normal(rng, cohort_table_->value, 0.3f);
    nn::fill_normal(rng, prep_table_->value, 0.3f);
    nn::fill_normal(rng, null_tokens_->value, 0.3f);

    conv_in_ = nn::Conv::create(ps_, "conv_in", cfg.latent_channels, w0, 3, 1, 1, rng);
    rb_down_ = detail::ResBlock::create(ps_, "rb_down", w0, w0, td, rng);
    down_ = nn::Conv::create(ps_, "down", w0, w1, 3, 2, 1, rng);
    rb_mid1_ = detail::ResBlock::create(ps_, "rb_mid1", w1, w1, td, rng);
    cross_ = detail::CrossBlock::create(ps_, "cross", w1, cfg.ctx_dim, cfg.attn_heads, rng);
    rb_mid2_ = detail::ResBlock::create(ps_, "rb_mid2", w1, w1, td, rng);
    rb_up_ = detail::ResBlock::create(ps_, "rb_up", w1 + w0, w0, td, rng);
    gn_out_ = nn::GroupNormLayer::create(ps_, "gn_out", w0, std::min(8, w0));
    conv_out_ = nn::Conv::create(ps_, "conv_out", w0, cfg.latent_channels, 3, 1, 1, rng);
    // Zero-initialized head: the untrained model predicts zero noise.
    conv_out_.w->value.setZero();
    conv_out_.b->value.setZero();
  }

  const LdmConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  long latent_numel() const {
    return static_cast<long>(cfg_.latent_channels) * cfg_.latent_size * cfg_.latent_size;
  }

  // Token matrix [3, ctx_dim]; a null condition uses the learned null tokens.
  Var ctx_tokens(Graph& g, const TileCondition* cond) const {
    if (cond == nullptr) return g.param(*null_tokens_);
    if (cond->embedding.size() != embedder::kDim)
      throw DataError("condition embedding has wrong dimension");
    if (cond->cohort < 0 || cond->cohort > 1 || cond->prep < 0 || cond->prep > 1)
      throw DataError("condition cohort/prep out of range");
    Arr e(embedder::kDim);
    for (int i = 0; i < embedder::kDim; ++i) e(i) = cond->embedding(i);
    Var emb = emb_proj_(g, g.input(std::move(e), {1, embedder::kDim}));
    Var coh = nn::gather_rows(g, g.param(*cohort_table_), {cond->cohort});
    Var prp = nn::gather_rows(g, g.param(*prep_table_), {cond->prep});
    return nn::concat_rows(g, nn::concat_rows(g, emb, coh), prp);
  }

  Var predict_eps(Graph& g, Var z_t, int t, Var ctx) const {
    Var temb = tmlp2_(g, nn::silu(g, tmlp1_(g, g.input(detail::sinusoidal_embedding(
                                                           t, cfg_.time_dim),
                                                       {cfg_.time_dim}))));
    Var h0 = conv_in_(g, z_t);
    Var h1 = rb_down_.apply(g, h0, temb);
    Var d = down_(g, h1);
    Var m = rb_mid1_.apply(g, d, temb);
    m = cross_.apply(g, m, ctx);
    m = rb_mid2_.apply(g, m, temb);
    Var u = nn::upsample_nearest2x(g, m);
    Var h3 = rb_up_.apply(g, detail::concat_chw(g, u, h1), temb);
    return conv_out_(g, nn::silu(g, gn_out_(g, h3)));
  }

  // Value-only convenience used by the sampler.
  Arr predict_eps_value(const Arr& z_t, int t, const TileCondition* cond) const {
    Graph g;
    Var z = g.input(z_t, {cfg_.latent_channels, cfg_.latent_size, cfg_.latent_size});
    return predict_eps(g, z, t, ctx_tokens(g, cond)).val();
  }

 private:
  LdmConfig cfg_;
  nn::ParamStore ps_;
  nn::Linear tmlp1_, tmlp2_, emb_proj_;
  nn::Param* cohort_table_ = nullptr;
  nn::Param* prep_table_ = nullptr;
  nn::Param* null_tokens_ = nullptr;
  nn::Conv conv_in_, down_, conv_out_;
  nn::GroupNormLayer gn_out_;
  detail::ResBlock rb_down_, rb_mid1_, rb_mid2_, rb_up_;
  detail::CrossBlock cross_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LdmTrainParams {
  int epochs = 30;
  int batch_size = 16;
  float lr = 5e-5f;
  float weight_decay = 0.0f;
  float cond_dropout = 0.1f;  // probability of swapping in the null condition
  uint64_t seed = 0;
  int start_epoch = 0;
};

struct LdmEpochStats {
  int epoch = 0;
  double train_loss = 0.0;  // mean per-sample |eps - eps_hat|^2 (sum over elements)
};

// Latents must already be normalized. Per sample: uniform timestep, fresh
// Gaussian noise, condition dropout, squared-error epsilon loss.
inline std::vector<LdmEpochStats> train_ldm(
    Ldm& model, const NoiseSchedule& ns, const std::vector<Arr>& latents,
    const std::vector<TileCondition>& conds, const LdmTrainParams& p,
    const std::function<void(const LdmEpochStats&)>& on_epoch = {}) {
  if (latents.empty()) throw DataError("train_ldm: empty training set");
  if (latents.size() != conds.size()) throw DataError("train_ldm: latent/condition mismatch");
  const long dim = model.latent_numel();
  for (const auto& z : latents)
    if (z.size() != dim) throw DataError("train_ldm: latent size mismatch");

  nn::AdamW opt;
  opt.weight_decay = p.weight_decay;
  const long steps_per_epoch =
      (static_cast<long>(latents.size()) + p.batch_size - 1) / p.batch_size;
  nn::CosineSchedule sched{p.lr, steps_per_epoch * p.epochs, 0, 0.0f};
  opt.t = steps_per_epoch * p.start_epoch;
  long step = opt.t;

  const int lc = model.config().latent_channels, ls = model.config().latent_size;
  std::vector<LdmEpochStats> history;
  for (int epoch = p.start_epoch; epoch < p.epochs; ++epoch) {
    Rng erng(derive_seed(p.seed, "ldm_epoch:" + std::to_string(epoch)));
    const auto batches = nn::make_batches(latents.size(), static_cast<size_t>(p.batch_size), erng);
    double loss_sum = 0.0;
    long loss_n = 0;
    for (const auto& batch : batches) {
      model.params().zero_grad();
      for (const size_t i : batch) {
        const int t = static_cast<int>(erng.uniform_int(0, ns.timesteps - 1));
        Arr eps(dim);
        for (long k = 0; k < dim; ++k) eps(k) = erng.normalf();
        const bool drop = erng.uniform() < p.cond_dropout;
        Arr z_t = ns.forward_sample(latents[i], t, eps);

        Graph g;
        Var zv = g.input(std::move(z_t), {lc, ls, ls});
        Var ctx = model.ctx_tokens(g, drop ? nullptr : &conds[i]);
        Var pred = model.predict_eps(g, zv, t, ctx);
        Var loss = nn::sum_squares(g, nn::sub(g, pred, g.constant(eps, {lc, ls, ls})));
        g.backward(nn::scale(g, loss, 1.0f / static_cast<float>(batch.size())));
        loss_sum += loss.val()(0);
        ++loss_n;
      }
      opt.step(model.params(), sched.lr_at(step));
      ++step;
    }
    LdmEpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : 0.0;
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SampleParams {
  float guidance_scale = 1.5f;  // 1.0 disables the unconditional pass
  int n_steps = 50;
  float x0_clip = 5.0f;  // normalized-latent safety clamp; <= 0 disables
};

// Descending timestep subsequence covering [0, T-1] endpoints.
inline std::vector<int> sampling_timesteps(int timesteps, int n_steps) {
  n_steps = std::min(std::max(2, n_steps), timesteps);
  std::vector<int> ts;
  int prev = -1;
  for (int i = 0; i < n_steps; ++i) {
    const int t = static_cast<int>(std::lround(
        static_cast<double>(i) * (timesteps - 1) / static_cast<double>(n_steps - 1)));
    if (t != prev) ts.push_back(t);
    prev = t;
  }
  std::reverse(ts.begin(), ts.end());
  return ts;
}

inline Arr sample_latent(const Ldm& model, const NoiseSchedule& ns,
                         const TileCondition* cond, const SampleParams& sp, Rng& rng) {
  const long dim = model.latent_numel();
  Arr z(dim);
  for (long k = 0; k < dim; ++k) z(k) = rng.normalf();

  const auto ts = sampling_timesteps(ns.timesteps, sp.n_steps);
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double ab_t = ns.alpha_bar[static_cast<size_t>(t)];
    const double ab_prev = i + 1 < ts.size() ? ns.alpha_bar[static_cast<size_t>(ts[i + 1])] : 1.0;

    Arr eps_hat;
    if (cond != nullptr && sp.guidance_scale != 1.0f) {
      const Arr eps_c = model.predict_eps_value(z, t, cond);
      const Arr eps_u = model.predict_eps_value(z, t, nullptr);
      eps_hat = eps_u + sp.guidance_scale * (eps_c - eps_u);
    } else {
      eps_hat = model.predict_eps_value(z, t, cond);
    }

    Arr x0 = (z - static_cast<float>(std::sqrt(1.0 - ab_t)) * eps_hat) /
             static_cast<float>(std::sqrt(ab_t));
    if (sp.x0_clip > 0.0f) x0 = x0.min(sp.x0_clip).max(-sp.x0_clip);

    // eta = 1: sigma^2 equals the DDPM posterior variance for this jump.
    const double sigma2 =
        (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
    const double sigma = std::sqrt(std::max(0.0, sigma2));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma2));

    z = static_cast<float>(std::sqrt(ab_prev)) * x0 + static_cast<float>(dir) * eps_hat;
    if (i + 1 < ts.size() && sigma > 0.0) {
      for (long k = 0; k < dim; ++k) z(k) += static_cast<float>(sigma) * rng.normalf();
    }
  }
  return z;
}

}  // namespace tilediff::diffusion
