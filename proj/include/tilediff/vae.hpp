// SPDX-License-Identifier: Apache-2.0
//
// VQ-VAE latent autoencoder: two stride-2 stages (spatial factor 4), a small
// vector-quantized bottleneck, and a mirrored nearest-upsample decoder.
// Diffusion later runs on the continuous pre-quantization latents; the
// quantizer sits in front of the decoder.

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "tilediff/common.hpp"
#include "tilediff/data.hpp"
#include "tilediff/nn.hpp"

namespace tilediff::vae {

using nn::Arr;
using nn::Graph;
using nn::Var;

struct VaeConfig {
  int image_size = 64;
  int base_channels = 32;
  int latent_channels = 3;
  int codebook_size = 128;
  float commit_beta = 0.25f;
  uint64_t init_seed = 1;

  int latent_size() const { return image_size / 4; }

  void validate() const {
    if (image_size < 16 || image_size % 4 != 0)
      throw ConfigError("vae image_size must be a multiple of 4, >= 16");
    if (base_channels < 8 || base_channels % 8 != 0)
      throw ConfigError("vae base_channels must be a positive multiple of 8");
    if (latent_channels < 1) throw ConfigError("vae latent_channels must be positive");
    if (codebook_size < 2) throw ConfigError("vae codebook_size must be >= 2");
    if (commit_beta < 0.0f) throw ConfigError("vae commit_beta must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const VaeConfig& c) {
  j = {{"image_size", c.image_size},       {"base_channels", c.base_channels},
       {"latent_channels", c.latent_channels}, {"codebook_size", c.codebook_size},
       {"commit_beta", c.commit_beta},     {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, VaeConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.commit_beta = j.value("commit_beta", c.commit_beta);
  c.init_seed = j.value("init_seed", c.init_seed);
}

inline std::string config_hash(const nlohmann::json& j) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

class VqVae {
 public:
  explicit VqVae(const VaeConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.init_seed, "vae_init"));
    const int b = cfg.base_channels;
    const int lc = cfg.latent_channels;
    enc1_ = nn::Conv::create(ps_, "enc1", 3, b, 3, 1, 1, rng);
    en1_ = nn::GroupNormLayer::create(ps_, "en1", b, 8);
    enc2_ = nn::Conv::create(ps_, "enc2", b, b, 3, 2, 1, rng);
    en2_ = nn::GroupNormLayer::create(ps_, "en2", b, 8);
    enc3_ = nn::Conv::create(ps_, "enc3", b, 2 * b, 3, 2, 1, rng);
    en3_ = nn::GroupNormLayer::create(ps_, "en3", 2 * b, 8);
    enc4_ = nn::Conv::create(ps_, "enc4", 2 * b, lc, 3, 1, 1, rng);
    dec1_ = nn::Conv::create(ps_, "dec1", lc, 2 * b, 3, 1, 1, rng);
    dn1_ = nn::GroupNormLayer::create(ps_, "dn1", 2 * b, 8);
    dec2_ = nn::Conv::create(ps_, "dec2", 2 * b, b, 3, 1, 1, rng);
    dn2_ = nn::GroupNormLayer::create(ps_, "dn2", b, 8);
    dec3_ = nn::Conv::create(ps_, "dec3", b, b, 3, 1, 1, rng);
    dn3_ = nn::GroupNormLayer::create(ps_, "dn3", b, 8);
    dec4_ = nn::Conv::create(ps_, "dec4", b, 3, 3, 1, 1, rng);
    codebook_ = &ps_.create("codebook", {cfg.codebook_size, lc});
    nn::fill_normal(rng, codebook_->value, 0.5f);
  }

  const VaeConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  Var encode(Graph& g, Var x) const {
    Var h = nn::silu(g, en1_(g, enc1_(g, x)));
    h = nn::silu(g, en2_(g, enc2_(g, h)));
    h = nn::silu(g, en3_(g, enc3_(g, h)));
    return enc4_(g, h);
  }

  Var decode(Graph& g, Var z) const {
    Var h = nn::silu(g, dn1_(g, dec1_(g, z)));
    h = nn::upsample_nearest2x(g, h);
    h = nn::silu(g, dn2_(g, dec2_(g, h)));
    h = nn::upsample_nearest2x(g, h);
    h = nn::silu(g, dn3_(g, dec3_(g, h)));
    return dec4_(g, h);
  }

  // Nearest codebook entry per latent position; ties resolve to the lowest
  // index.
  std::vector<int> nearest_codes(const Arr& ze) const {
    const int lc = cfg_.latent_channels;
    const long hw = ze.size() / lc;
    const int k = cfg_.codebook_size;
    std::vector<int> idx(static_cast<size_t>(hw));
    for (long p = 0; p < hw; ++p) {
      int best = 0;
      float best_d = std::numeric_limits<float>::infinity();
      for (int c = 0; c < k; ++c) {
        float d = 0.0f;
        for (int ch = 0; ch < lc; ++ch) {
          const float diff = ze(static_cast<long>(ch) * hw + p) -
                             codebook_->value(static_cast<long>(c) * lc + ch);
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      idx[static_cast<size_t>(p)] = best;
    }
    return idx;
  }

  struct TrainOut {
    Var loss, recon, ze, zq;
    std::vector<int> indices;
    double recon_mse = 0.0;
  };

  // Straight-through forward: the decoder sees quantized latents, the
  // encoder receives the decoder gradient unchanged, and the codebook is
  // pulled by its own loss terms.
  TrainOut forward_train(Graph& g, const Arr& x_chw) const {
    const int s = cfg_.image_size, ls = cfg_.latent_size(), lc = cfg_.latent_channels;
    const long hw = static_cast<long>(ls) * ls;
    Var x = g.input(x_chw, {3, s, s});
    Var ze = encode(g, x);
    TrainOut out;
    out.ze = ze;
    out.indices = nearest_codes(ze.val());

    Var ze_rows = nn::transpose2d(g, nn::reshape(g, ze, {lc, static_cast<int>(hw)}));
    Var e_rows = nn::gather_rows(g, g.param(*codebook_), out.indices);
    Var zq_rows = nn::add(
        g, ze_rows,
        g.constant(Arr(e_rows.val() - ze_rows.val()), {static_cast<int>(hw), lc}));
    out.zq = nn::reshape(g, nn::transpose2d(g, zq_rows), {lc, ls, ls});
    out.recon = decode(g, out.zq);

    Var rec = nn::scale(g, nn::sum_squares(g, nn::sub(g, out.recon, x)),
                        1.0f / static_cast<float>(x_chw.size()));
    const float inv_latent = 1.0f / static_cast<float>(hw * lc);
    Var cb = nn::scale(g, nn::sum_squares(g, nn::sub(g, nn::detach(g, ze_rows), e_rows)),
                       inv_latent);
    Var commit = nn::scale(g, nn::sum_squares(g, nn::sub(g, ze_rows, nn::detach(g, e_rows))),
                           cfg_.commit_beta * inv_latent);
    out.loss = nn::add(g, rec, nn::add(g, cb, commit));
    out.recon_mse = rec.val()(0);
    return out;
  }

  // Continuous (pre-quantization) latent of an image; this is the space the
  // diffusion model works in.
  Arr encode_latent(const Image& img) const {
    if (img.width != cfg_.image_size || img.height != cfg_.image_size)
      throw DataError("vae: image size mismatch");
    Graph g;
    Var x = g.input(nn::image_to_chw(img), {3, cfg_.image_size, cfg_.image_size});
    return encode(g, x).val();
  }

  Arr quantize(const Arr& ze) const {
    const int lc = cfg_.latent_channels;
    const long hw = ze.size() / lc;
    const auto idx = nearest_codes(ze);
    Arr zq(ze.size());
    for (long p = 0; p < hw; ++p)
      for (int ch = 0; ch < lc; ++ch)
        zq(static_cast<long>(ch) * hw + p) =
            codebook_->value(static_cast<long>(idx[static_cast<size_t>(p)]) * lc + ch);
    return zq;
  }

  // Quantizes, then decodes to an RGB8 image.
  Image decode_latent(const Arr& z) const {
    const int ls = cfg_.latent_size();
    Graph g;
    Var zv = g.input(quantize(z), {cfg_.latent_channels, ls, ls});
    Var recon = decode(g, zv);
    return nn::chw_to_image(recon.val(), cfg_.image_size, cfg_.image_size);
  }

  Image reconstruct(const Image& img) const { return decode_latent(encode_latent(img)); }

 private:
  VaeConfig cfg_;
  nn::ParamStore ps_;
  nn::Conv enc1_, enc2_, enc3_, enc4_, dec1_, dec2_, dec3_, dec4_;
  nn::GroupNormLayer en1_, en2_, en3_, dn1_, dn2_, dn3_;
  nn::Param* codebook_ = nullptr;
};

// PSNR in dB between [0,1] float tensors (values clamped first).
inline double psnr_01(const Arr& a, const Arr& b) {
  if (a.size() != b.size()) throw DataError("psnr: size mismatch");
  const double mse = (a.min(1.0f).max(0.0f) - b.min(1.0f).max(0.0f)).square().mean();
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct VaeTrainParams {
  int epochs = 20;
  int batch_size = 8;
  float lr = 1e-3f;
  float weight_decay = 0.0f;
  uint64_t seed = 0;
  int start_epoch = 0;  // resume point; epoch RNG streams derive from (seed, epoch)
};

struct VaeEpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_psnr = 0.0;
  double codebook_usage = 0.0;  // fraction of codes hit this epoch
};

inline std::vector<VaeEpochStats> train_vae(
    VqVae& model, const std::vector<Image>& train, const std::vector<Image>& val,
    const VaeTrainParams& p,
    const std::function<void(const VaeEpochStats&)>& on_epoch = {}) {
  if (train.empty()) throw DataError("train_vae: empty training set");
  std::vector<Arr> train_chw, val_chw;
  train_chw.reserve(train.size());
  for (const auto& img : train) train_chw.push_back(nn::image_to_chw(img));
  for (const auto& img : val) val_chw.push_back(nn::image_to_chw(img));

  nn::AdamW opt;
  opt.weight_decay = p.weight_decay;
  const long steps_per_epoch =
      (static_cast<long>(train.size()) + p.batch_size - 1) / p.batch_size;
  nn::CosineSchedule sched{p.lr, steps_per_epoch * p.epochs, 0, 0.0f};
  // Resumed runs replay the optimizer clock up to the start epoch.
  opt.t = steps_per_epoch * p.start_epoch;
  long step = opt.t;

  std::vector<VaeEpochStats> history;
  for (int epoch = p.start_epoch; epoch < p.epochs; ++epoch) {
    Rng erng(derive_seed(p.seed, "vae_epoch:" + std::to_string(epoch)));
    const auto batches =
        nn::make_batches(train_chw.size(), static_cast<size_t>(p.batch_size), erng);
    double loss_sum = 0.0;
    long loss_n = 0;
    std::set<int> used;
    for (const auto& batch : batches) {
      model.params().zero_grad();
      for (const size_t i : batch) {
        Graph g;
        auto out = model.forward_train(g, train_chw[i]);
        g.backward(nn::scale(g, out.loss, 1.0f / static_cast<float>(batch.size())));
        loss_sum += out.loss.val()(0);
        ++loss_n;
        used.insert(out.indices.begin(), out.indices.end());
      }
      opt.step(model.params(), sched.lr_at(step));
      ++step;
    }

    VaeEpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : 0.0;
    st.codebook_usage =
        static_cast<double>(used.size()) / model.config().codebook_size;
    if (!val_chw.empty()) {
      double acc = 0.0;
      for (const auto& x : val_chw) {
        Graph g;
        auto out = model.forward_train(g, x);
        acc += psnr_01(out.recon.val(), x);
      }
      st.val_psnr = acc / static_cast<double>(val_chw.size());
    }
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return history;
}

}  // namespace tilediff::vae
