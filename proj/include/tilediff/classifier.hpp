// SPDX-License-Identifier: Apache-2.0
//
// Downstream 4-class tile classifier: a small pre-LN ViT (patch tokens, cls
// token, learned positions) trained under a weighted sum of the synthetic
// and real cross-entropy terms,
//   L = w_s * CE(synthetic) + (1 - w_s) * CE(real),
// with the full augmentation-policy family (identity, geometric, color
// jitter, their composition, Macenko/Vahadane stain augmentation, and the
// synthetic-counterpart variants), plus a linear probe on frozen tile
// embeddings as a classical baseline.
//
// When one stream's weight is an exact endpoint (0 or 1) the zero-weighted
// stream is dropped from the loader entirely, so endpoint runs reproduce
// the single-stream trajectory seed-for-seed.

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tilediff/common.hpp"
#include "tilediff/data.hpp"
#include "tilediff/metrics.hpp"
#include "tilediff/nn.hpp"
#include "tilediff/stain.hpp"

namespace tilediff::classifier {

using nn::Arr;
using nn::Graph;
using nn::Var;

// ---------------------------------------------------------------------------
// Config and model
// ---------------------------------------------------------------------------

struct ClassifierConfig {
  int image_size = 64;
  int patch = 8;
  int dim = 128;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int n_classes = 4;
  uint64_t init_seed = 3;

  int n_tokens() const {
    const int side = image_size / patch;
    return side * side;
  }

  void validate() const {
    if (image_size < 16 || patch < 2 || image_size % patch != 0)
      throw ConfigError("classifier image_size must be a multiple of patch");
    if (dim % heads != 0) throw ConfigError("classifier dim must be divisible by heads");
    if (depth < 1) throw ConfigError("classifier depth must be >= 1");
    if (n_classes < 2) throw ConfigError("classifier n_classes must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"image_size", c.image_size}, {"patch", c.patch},     {"dim", c.dim},
       {"depth", c.depth},           {"heads", c.heads},     {"mlp_ratio", c.mlp_ratio},
       {"n_classes", c.n_classes},   {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.patch = j.value("patch", c.patch);
  c.dim = j.value("dim", c.dim);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.init_seed = j.value("init_seed", c.init_seed);
}

class VitClassifier {
 public:
  explicit VitClassifier(const ClassifierConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(derive_seed(cfg.init_seed, "vit_init"));
    const int pd = 3 * cfg.patch * cfg.patch;
    patch_proj_ = nn::Linear::create(ps_, "patch_proj", pd, cfg.dim, rng);
    cls_token_ = &ps_.create("cls_token", {1, cfg.dim});
    pos_embed_ = &ps_.create("pos_embed", {cfg.n_tokens() + 1, cfg.dim});
    nn::fill_normal(rng, cls_token_->value, 0.02f);
    nn::fill_normal(rng, pos_embed_->value, 0.02f);
    blocks_.reserve(static_cast<size_t>(cfg.depth));
    for (int d = 0; d < cfg.depth; ++d) {
      Block b;
      const std::string pre = "block" + std::to_string(d);
      b.ln1 = nn::LayerNormLayer::create(ps_, pre + ".ln1", cfg.dim);
      b.attn = nn::Attention::create(ps_, pre + ".attn", cfg.dim, cfg.heads, rng);
      b.ln2 = nn::LayerNormLayer::create(ps_, pre + ".ln2", cfg.dim);
      b.mlp = nn::Mlp::create(ps_, pre + ".mlp", cfg.dim, cfg.dim * cfg.mlp_ratio, rng);
      blocks_.push_back(b);
    }
    ln_out_ = nn::LayerNormLayer::create(ps_, "ln_out", cfg.dim);
    head_ = nn::Linear::create(ps_, "head", cfg.dim, cfg.n_classes, rng, 0.5f);
  }

  const ClassifierConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  Arr patchify(const Image& img) const {
    if (img.width != cfg_.image_size || img.height != cfg_.image_size)
      throw DataError("classifier: image size mismatch");
    const int p = cfg_.patch, side = cfg_.image_size / p;
    const int pd = 3 * p * p;
    Arr out(static_cast<long>(cfg_.n_tokens()) * pd);
    long w = 0;
    for (int ty = 0; ty < side; ++ty)
      for (int tx = 0; tx < side; ++tx)
        for (int c = 0; c < 3; ++c)
          for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
              out(w++) = img.at(tx * p + dx, ty * p + dy, c) / 255.0f;
    return out;
  }

  Var logits(Graph& g, const Arr& patches) const {
    const int n = cfg_.n_tokens();
    const int pd = 3 * cfg_.patch * cfg_.patch;
    Var tok = patch_proj_(g, g.input(patches, {n, pd}));      // [n, dim]
    Var x = nn::concat_rows(g, g.param(*cls_token_), tok);    // [n+1, dim]
    x = nn::add(g, x, g.param(*pos_embed_));
    for (const auto& b : blocks_) {
      Var h = b.ln1(g, x);
      x = nn::add(g, x, b.attn(g, h, h));
      x = nn::add(g, x, b.mlp(g, b.ln2(g, x)));
    }
    Var cls = nn::slice_rows(g, ln_out_(g, x), 0, 1);         // [1, dim]
    return nn::reshape(g, head_(g, cls), {cfg_.n_classes});
  }

  Eigen::VectorXf logits_value(const Image& img) const {
    Graph g;
    const Arr z = logits(g, patchify(img)).val();
    return Eigen::Map<const Eigen::VectorXf>(z.data(), z.size());
  }

  // Softmax probabilities; rows sum to 1. Argmax ties break toward the
  // lowest class index.
  Eigen::MatrixXf predict_proba(const std::vector<Image>& images) const {
    Eigen::MatrixXf p(static_cast<Eigen::Index>(images.size()), cfg_.n_classes);
    for (size_t i = 0; i < images.size(); ++i) {
      Eigen::VectorXf z = logits_value(images[i]);
      z.array() -= z.maxCoeff();
      Eigen::VectorXf e = z.array().exp();
      p.row(static_cast<Eigen::Index>(i)) = (e / e.sum()).transpose();
    }
    return p;
  }

  int predict_one(const Image& img) const {
    const Eigen::VectorXf z = logits_value(img);
    int best = 0;
    for (int c = 1; c < cfg_.n_classes; ++c)
      if (z(c) > z(best)) best = c;
    return best;
  }

  std::vector<int> predict(const std::vector<Image>& images) const {
    std::vector<int> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(predict_one(img));
    return out;
  }

 private:
  struct Block {
    nn::LayerNormLayer ln1, ln2;
    nn::Attention attn;
    nn::Mlp mlp;
  };

  ClassifierConfig cfg_;
  nn::ParamStore ps_;
  nn::Linear patch_proj_, head_;
  nn::Param* cls_token_ = nullptr;
  nn::Param* pos_embed_ = nullptr;
  std::vector<Block> blocks_;
  nn::LayerNormLayer ln_out_;
};

// ---------------------------------------------------------------------------
// Augmentation policies
// ---------------------------------------------------------------------------

// Each policy applies exactly the transforms its name lists; the synthetic
// (ldm_*) variants add counterpart tiles to the pool and apply any stain
// augmentation to real and synthetic images alike.
enum class AugPolicy {
  none,
  geometric,
  color_jitter,
  standard,  // geometric then color jitter, split seeds
  macenko,
  vahadane,
  ldm,
  ldm_macenko,
  ldm_vahadane,
};

inline const char* to_string(AugPolicy p) {
  switch (p) {
    case AugPolicy::none: return "none";
    case AugPolicy::geometric: return "geometric";
    case AugPolicy::color_jitter: return "color_jitter";
    case AugPolicy::standard: return "standard";
    case AugPolicy::macenko: return "macenko";
    case AugPolicy::vahadane: return "vahadane";
    case AugPolicy::ldm: return "ldm";
    case AugPolicy::ldm_macenko: return "ldm_macenko";
    default: return "ldm_vahadane";
  }
}

inline AugPolicy aug_policy_from_string(const std::string& s) {
  for (AugPolicy p : {AugPolicy::none, AugPolicy::geometric, AugPolicy::color_jitter,
                      AugPolicy::standard, AugPolicy::macenko, AugPolicy::vahadane,
                      AugPolicy::ldm, AugPolicy::ldm_macenko, AugPolicy::ldm_vahadane})
    if (s == to_string(p)) return p;
  throw ConfigError("unknown augmentation policy: " + s);
}

inline bool policy_uses_synthetic(AugPolicy p) {
  return p == AugPolicy::ldm || p == AugPolicy::ldm_macenko || p == AugPolicy::ldm_vahadane;
}

inline std::optional<stain::SeparationMethod> policy_stain_method(AugPolicy p) {
  if (p == AugPolicy::macenko || p == AugPolicy::ldm_macenko)
    return stain::SeparationMethod::macenko;
  if (p == AugPolicy::vahadane || p == AugPolicy::ldm_vahadane)
    return stain::SeparationMethod::vahadane;
  return std::nullopt;
}

inline Image apply_policy(const Image& img, AugPolicy policy,
                          const stain::JitterParams& jitter,
                          const stain::AugmentParams& stain_params, uint64_t seed,
                          long* stain_fallbacks = nullptr) {
  switch (policy) {
    case AugPolicy::none:
    case AugPolicy::ldm:
      return img;
    case AugPolicy::geometric:
      return stain::geometric_augment(img, derive_seed(seed, "geo"));
    case AugPolicy::color_jitter:
      return stain::color_jitter(img, jitter, derive_seed(seed, "jitter"));
    case AugPolicy::standard: {
      Image out = stain::geometric_augment(img, derive_seed(seed, "geo"));
      return stain::color_jitter(out, jitter, derive_seed(seed, "jitter"));
    }
    default: {
      stain::AugmentParams p = stain_params;
      p.rng_seed = derive_seed(seed, "stain");
      try {
        return stain::stain_augment(img, *policy_stain_method(policy), p);
      } catch (const stain::DegenerateStainPlane&) {
        if (stain_fallbacks) ++(*stain_fallbacks);
        return img;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Weighted loss
// ---------------------------------------------------------------------------

// L = w_s * mean(synthetic CE) + (1 - w_s) * mean(real CE). If one stream is
// absent its term vanishes and the other's mean is used unweighted; both
// absent is an error.
inline double weighted_loss(const std::vector<double>& real_losses,
                            const std::vector<double>& synth_losses, double w_s) {
  if (w_s < 0.0 || w_s > 1.0) throw ConfigError("w_s must be in [0,1]");
  if (real_losses.empty() && synth_losses.empty())
    throw DataError("weighted_loss: both sub-batches empty");
  if (synth_losses.empty()) return mean_of(real_losses);
  if (real_losses.empty()) return mean_of(synth_losses);
  return w_s * mean_of(synth_losses) + (1.0 - w_s) * mean_of(real_losses);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainExample {
  std::string tile_id;
  Image image;
  int label = 0;
  bool synthetic = false;
};

struct ClassifierTrainParams {
  int max_epochs = 200;
  int batch_size = 32;
  float lr = 1e-4f;
  float weight_decay = 1e-4f;
  int patience = 5;
  AugPolicy policy = AugPolicy::none;
  double w_synth = 0.5;  // synthetic CE weight; only meaningful for ldm_* policies
  stain::JitterParams jitter{0.1, 0.1, 0.1, 5.0};
  stain::AugmentParams stain_params;
  uint64_t seed = 0;

  void validate() const {
    if (w_synth < 0.0 || w_synth > 1.0) throw ConfigError("w_synth must be in [0,1]");
    if (max_epochs < 1 || batch_size < 1) throw ConfigError("bad classifier train params");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    jitter.validate();
    stain_params.validate();
  }
};

struct ClassifierEpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_macro_f1 = 0.0;
};

struct ClassifierTrainResult {
  std::vector<ClassifierEpochStats> history;
  double best_val_loss = 0.0;
  int epochs_ran = 0;
  bool stopped_early = false;
  long stain_fallbacks = 0;  // tiles whose stain separation failed; used as-is
};

// Early stopping tracks validation loss (patience epochs without a new
// minimum) and restores the best checkpoint before returning.
inline ClassifierTrainResult train_classifier(
    VitClassifier& model, const std::vector<TrainExample>& train_pool,
    const std::vector<TrainExample>& val_pool, const ClassifierTrainParams& p,
    const std::function<void(const ClassifierEpochStats&)>& on_epoch = {}) {
  p.validate();
  bool pool_has_synth = false;
  for (const auto& e : train_pool) pool_has_synth = pool_has_synth || e.synthetic;
  if (policy_uses_synthetic(p.policy) && !pool_has_synth)
    throw ConfigError("policy " + std::string(to_string(p.policy)) +
                      " requires synthetic tiles in the training pool");
  if (!policy_uses_synthetic(p.policy) && pool_has_synth)
    throw ConfigError("policy " + std::string(to_string(p.policy)) +
                      " does not accept synthetic tiles");

  // Endpoint weights remove the dead stream from the loader.
  std::vector<TrainExample> train;
  for (const auto& e : train_pool) {
    if (e.synthetic && policy_uses_synthetic(p.policy) && p.w_synth == 0.0) continue;
    if (!e.synthetic && policy_uses_synthetic(p.policy) && p.w_synth == 1.0) continue;
    train.push_back(e);
  }
  if (train.empty()) throw DataError("train_classifier: empty training set");

  std::vector<Arr> val_patches;
  std::vector<int> val_labels;
  for (const auto& e : val_pool) {
    if (e.synthetic) throw DataError("synthetic tile in validation set: " + e.tile_id);
    val_patches.push_back(model.patchify(e.image));
    val_labels.push_back(e.label);
  }

  nn::AdamW opt;
  opt.weight_decay = p.weight_decay;
  nn::EarlyStopper stopper(p.patience);  // maximizes; feed negated val loss
  ClassifierTrainResult result;

  for (int epoch = 0; epoch < p.max_epochs; ++epoch) {
    Rng erng(derive_seed(p.seed, "cls_epoch:" + std::to_string(epoch)));
    const uint64_t aug_seed = derive_seed(p.seed, "aug:" + std::to_string(epoch));
    const auto batches = nn::make_batches(train.size(), static_cast<size_t>(p.batch_size), erng);

    double loss_sum = 0.0;
    long batch_n = 0;
    for (const auto& batch : batches) {
      long n_synth = 0, n_real = 0;
      for (const size_t i : batch) (train[i].synthetic ? n_synth : n_real) += 1;
      model.params().zero_grad();
      double batch_loss = 0.0;
      for (const size_t i : batch) {
        const auto& ex = train[i];
        const Image img = apply_policy(ex.image, p.policy, p.jitter, p.stain_params,
                                       derive_seed(aug_seed, ex.tile_id),
                                       &result.stain_fallbacks);
        // Per-example weight reproducing the weighted sum of sub-batch mean
        // CEs; a batch with a single stream falls back to the plain mean.
        double w;
        if (n_synth > 0 && n_real > 0)
          w = ex.synthetic ? p.w_synth / static_cast<double>(n_synth)
                           : (1.0 - p.w_synth) / static_cast<double>(n_real);
        else
          w = 1.0 / static_cast<double>(batch.size());
        Graph g;
        Var loss = nn::cross_entropy_logits(g, model.logits(g, model.patchify(img)), ex.label);
        g.backward(nn::scale(g, loss, static_cast<float>(w)));
        batch_loss += w * loss.val()(0);
      }
      if (!std::isfinite(batch_loss)) throw TrainError("non-finite training loss");
      opt.step(model.params(), p.lr);
      loss_sum += batch_loss;
      ++batch_n;
    }

    ClassifierEpochStats st;
    st.epoch = epoch;
    st.train_loss = batch_n > 0 ? loss_sum / static_cast<double>(batch_n) : 0.0;
    if (!val_patches.empty()) {
      double vloss = 0.0;
      std::vector<int> pred(val_patches.size());
      for (size_t i = 0; i < val_patches.size(); ++i) {
        Graph g;
        Var z = model.logits(g, val_patches[i]);
        vloss += nn::cross_entropy_logits(g, z, val_labels[i]).val()(0);
        const Arr& zv = z.val();
        int best = 0;
        for (int c = 1; c < model.config().n_classes; ++c)
          if (zv(c) > zv(best)) best = c;
        pred[i] = best;
      }
      st.val_loss = vloss / static_cast<double>(val_patches.size());
      st.val_macro_f1 =
          metrics::f1_scores(val_labels, pred, model.config().n_classes).macro_f1;
    }
    result.history.push_back(st);
    result.epochs_ran = epoch + 1;
    if (on_epoch) on_epoch(st);

    if (!val_patches.empty() && stopper.update(-st.val_loss, model.params())) {
      result.stopped_early = true;
      break;
    }
  }
  if (stopper.has_snapshot()) stopper.restore(model.params());
  result.best_val_loss = -stopper.best();
  return result;
}

// ---------------------------------------------------------------------------
// Linear probe on frozen embeddings (multinomial logistic regression)
// ---------------------------------------------------------------------------

struct LinearProbe {
  Eigen::MatrixXf w;  // [n_classes, dim]
  Eigen::VectorXf b;

  std::vector<int> predict(const Eigen::MatrixXf& features) const {
    std::vector<int> out(static_cast<size_t>(features.rows()));
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      Eigen::VectorXf z = w * features.row(i).transpose() + b;
      Eigen::Index best = 0;
      z.maxCoeff(&best);
      out[static_cast<size_t>(i)] = static_cast<int>(best);
    }
    return out;
  }
};

struct LinearProbeParams {
  int epochs = 300;
  float lr = 0.5f;
  float l2 = 1e-4f;
};

// Full-batch gradient descent on the L2-regularized softmax objective;
// deterministic (zero init, no RNG).
inline LinearProbe train_linear_probe(const Eigen::MatrixXf& features,
                                      const std::vector<int>& labels, int n_classes,
                                      const LinearProbeParams& p = {}) {
  if (features.rows() != static_cast<Eigen::Index>(labels.size()))
    throw DataError("linear probe: feature/label mismatch");
  if (features.rows() == 0) throw DataError("linear probe: empty input");
  std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw DataError("linear probe: training set has a single class");
  const auto n = features.rows();
  const auto d = features.cols();
  LinearProbe probe;
  probe.w = Eigen::MatrixXf::Zero(n_classes, d);
  probe.b = Eigen::VectorXf::Zero(n_classes);
  for (int epoch = 0; epoch < p.epochs; ++epoch) {
    Eigen::MatrixXf gw = Eigen::MatrixXf::Zero(n_classes, d);
    Eigen::VectorXf gb = Eigen::VectorXf::Zero(n_classes);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXf z = probe.w * features.row(i).transpose() + probe.b;
      z.array() -= z.maxCoeff();
      Eigen::VectorXf prob = z.array().exp();
      prob /= prob.sum();
      prob(labels[static_cast<size_t>(i)]) -= 1.0f;
      gw += prob * features.row(i);
      gb += prob;
    }
    gw /= static_cast<float>(n);
    gb /= static_cast<float>(n);
    gw += p.l2 * probe.w;
    probe.w -= p.lr * gw;
    probe.b -= p.lr * gb;
  }
  return probe;
}

}  // namespace tilediff::classifier
