// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: resolved configuration with profiles, an
// append-only run ledger with config-hash resume semantics, the staged
// pipeline (corpus, embeddings, autoencoder, diffusion, counterpart
// generation), the policy x fold x seed evaluation matrix with paired
// statistics and leakage audits, and report rendering.
//
// Every stage seed derives from the root experiment seed; classifier seeds
// derive from (evaluation seed, fold) only, never from the policy, so runs
// that differ only in augmentation policy share initialization and batch
// order.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "tilediff/checkpoint.hpp"
#include "tilediff/classifier.hpp"
#include "tilediff/common.hpp"
#include "tilediff/corpus.hpp"
#include "tilediff/diffusion.hpp"
#include "tilediff/embedder.hpp"
#include "tilediff/metrics.hpp"
#include "tilediff/splits.hpp"
#include "tilediff/stain.hpp"
#include "tilediff/vae.hpp"
#include "tilediff/viz.hpp"

namespace tilediff::pipeline {

namespace fs = std::filesystem;
using corpus::TileRecord;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct VaeTrainSection {
  int epochs = 18;
  int batch_size = 8;
  float lr = 1e-3f;
};

struct LdmTrainSection {
  int epochs = 24;
  long iters = 0;  // >0 overrides epochs: ceil(iters / batches_per_epoch)
  int batch_size = 16;
  float lr = 1e-4f;
  float cond_dropout = 0.1f;
};

struct ClsTrainSection {
  int max_epochs = 60;
  int batch_size = 32;
  float lr = 3e-4f;
  float weight_decay = 1e-4f;
  int patience = 5;
};

struct ExperimentConfig {
  std::string profile = "desk";
  uint64_t seed = 17;

  corpus::CorpusSpec corpus;
  vae::VaeConfig vae;
  VaeTrainSection vae_train;
  diffusion::LdmConfig ldm;
  LdmTrainSection ldm_train;
  std::string ldm_domains = "both";  // "both" | "source_only": unlabeled pools fed
                                     // to the generative stack
  diffusion::SampleParams sample;
  // Cohort written into the condition when generating counterparts: "source"
  // keeps each tile's own metadata, "target" relabels the cohort token.
  std::string counterpart_cohort = "source";

  classifier::ClassifierConfig cls;
  ClsTrainSection cls_train;
  double w_synth = 0.3;
  std::vector<double> ws_grid = {0.1, 0.2, 0.3, 0.4, 0.5};
  bool ws_grid_search = false;
  stain::JitterParams jitter{0.1, 0.1, 0.1, 5.0};
  stain::AugmentParams stain_aug;

  int n_folds = 5;
  double train_fraction = 0.8;
  double vae_split_fraction = 0.9;
  std::vector<uint64_t> eval_seeds = {101, 202, 303};
  std::vector<std::string> policies = {"none", "ldm"};
  int fid_samples = 2000;

  void validate() const {
    corpus.validate();
    vae.validate();
    ldm.validate();
    cls.validate();
    if (vae.image_size != corpus.image_size || cls.image_size != corpus.image_size)
      throw ConfigError("vae/classifier image_size must match the corpus");
    if (ldm.latent_size != vae.latent_size() || ldm.latent_channels != vae.latent_channels)
      throw ConfigError("ldm latent geometry must match the autoencoder");
    if (ldm_domains != "both" && ldm_domains != "source_only")
      throw ConfigError("ldm_domains must be 'both' or 'source_only'");
    if (counterpart_cohort != "source" && counterpart_cohort != "target")
      throw ConfigError("counterpart_cohort must be 'source' or 'target'");
    if (w_synth < 0.0 || w_synth > 1.0) throw ConfigError("w_synth must be in [0,1]");
    if (ws_grid.empty()) throw ConfigError("ws_grid must be non-empty");
    for (double w : ws_grid)
      if (w < 0.0 || w > 1.0) throw ConfigError("ws_grid entries must be in [0,1]");
    if (n_folds < 2) throw ConfigError("n_folds must be >= 2");
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
      throw ConfigError("train_fraction must be in (0,1)");
    if (vae_split_fraction <= 0.0 || vae_split_fraction >= 1.0)
      throw ConfigError("vae_split_fraction must be in (0,1)");
    if (eval_seeds.empty()) throw ConfigError("eval_seeds must be non-empty");
    if (policies.empty()) throw ConfigError("policies must be non-empty");
    for (const auto& p : policies) classifier::aug_policy_from_string(p);
    if (fid_samples < 2) throw ConfigError("fid_samples must be >= 2");
    if (ldm_train.iters < 0) throw ConfigError("ldm iters must be >= 0");
    jitter.validate();
    stain_aug.validate();
  }

  // Derives every sub-seed from the root seed and checks consistency.
  void resolve() {
    corpus.rng_seed = derive_seed(seed, "corpus");
    validate();
  }

  json to_json_full() const {
    json j;
    j["profile"] = profile;
    j["seed"] = seed;
    j["corpus"] = corpus;
    j["vae"] = {{"model", vae},
                {"train",
                 {{"epochs", vae_train.epochs},
                  {"batch_size", vae_train.batch_size},
                  {"lr", vae_train.lr}}}};
    j["ldm"] = {{"model", ldm},
                {"train",
                 {{"epochs", ldm_train.epochs},
                  {"iters", ldm_train.iters},
                  {"batch_size", ldm_train.batch_size},
                  {"lr", ldm_train.lr},
                  {"cond_dropout", ldm_train.cond_dropout}}},
                {"domains", ldm_domains}};
    j["sample"] = {{"guidance_scale", sample.guidance_scale},
                   {"n_steps", sample.n_steps},
                   {"x0_clip", sample.x0_clip}};
    j["counterpart_cohort"] = counterpart_cohort;
    j["classifier"] = {{"model", cls},
                       {"train",
                        {{"max_epochs", cls_train.max_epochs},
                         {"batch_size", cls_train.batch_size},
                         {"lr", cls_train.lr},
                         {"weight_decay", cls_train.weight_decay},
                         {"patience", cls_train.patience}}},
                       {"w_synth", w_synth},
                       {"ws_grid", ws_grid},
                       {"ws_grid_search", ws_grid_search}};
    j["augment"] = {{"jitter",
                     {{"brightness", jitter.brightness},
                      {"contrast", jitter.contrast},
                      {"saturation", jitter.saturation},
                      {"hue_degrees", jitter.hue_degrees}}},
                    {"stain",
                     {{"alpha", {stain_aug.alpha[0].lo, stain_aug.alpha[0].hi}},
                      {"beta", {stain_aug.beta[0].lo, stain_aug.beta[0].hi}}}}};
    j["experiment"] = {{"n_folds", n_folds},
                       {"train_fraction", train_fraction},
                       {"vae_split_fraction", vae_split_fraction},
                       {"eval_seeds", eval_seeds},
                       {"policies", policies},
                       {"fid_samples", fid_samples}};
    return j;
  }

  // Overlays fields present in `j` onto the current values (profile defaults).
  void apply(const json& j) {
    profile = j.value("profile", profile);
    seed = j.value("seed", seed);
    if (j.contains("corpus")) j.at("corpus").get_to(corpus);
    if (j.contains("vae")) {
      const auto& v = j.at("vae");
      if (v.contains("model")) v.at("model").get_to(vae);
      if (v.contains("train")) {
        const auto& t = v.at("train");
        vae_train.epochs = t.value("epochs", vae_train.epochs);
        vae_train.batch_size = t.value("batch_size", vae_train.batch_size);
        vae_train.lr = t.value("lr", vae_train.lr);
      }
    }
    if (j.contains("ldm")) {
      const auto& v = j.at("ldm");
      if (v.contains("model")) v.at("model").get_to(ldm);
      if (v.contains("train")) {
        const auto& t = v.at("train");
        ldm_train.epochs = t.value("epochs", ldm_train.epochs);
        ldm_train.iters = t.value("iters", ldm_train.iters);
        ldm_train.batch_size = t.value("batch_size", ldm_train.batch_size);
        ldm_train.lr = t.value("lr", ldm_train.lr);
        ldm_train.cond_dropout = t.value("cond_dropout", ldm_train.cond_dropout);
      }
      ldm_domains = v.value("domains", ldm_domains);
    }
    if (j.contains("sample")) {
      const auto& s = j.at("sample");
      sample.guidance_scale = s.value("guidance_scale", sample.guidance_scale);
      sample.n_steps = s.value("n_steps", sample.n_steps);
      sample.x0_clip = s.value("x0_clip", sample.x0_clip);
    }
    counterpart_cohort = j.value("counterpart_cohort", counterpart_cohort);
    if (j.contains("classifier")) {
      const auto& v = j.at("classifier");
      if (v.contains("model")) v.at("model").get_to(cls);
      if (v.contains("train")) {
        const auto& t = v.at("train");
        cls_train.max_epochs = t.value("max_epochs", cls_train.max_epochs);
        cls_train.batch_size = t.value("batch_size", cls_train.batch_size);
        cls_train.lr = t.value("lr", cls_train.lr);
        cls_train.weight_decay = t.value("weight_decay", cls_train.weight_decay);
        cls_train.patience = t.value("patience", cls_train.patience);
      }
      w_synth = v.value("w_synth", w_synth);
      ws_grid = v.value("ws_grid", ws_grid);
      ws_grid_search = v.value("ws_grid_search", ws_grid_search);
    }
    if (j.contains("augment")) {
      const auto& v = j.at("augment");
      if (v.contains("jitter")) {
        const auto& t = v.at("jitter");
        jitter.brightness = t.value("brightness", jitter.brightness);
        jitter.contrast = t.value("contrast", jitter.contrast);
        jitter.saturation = t.value("saturation", jitter.saturation);
        jitter.hue_degrees = t.value("hue_degrees", jitter.hue_degrees);
      }
      if (v.contains("stain")) {
        const auto& t = v.at("stain");
        if (t.contains("alpha")) {
          const auto a = t.at("alpha").get<std::vector<double>>();
          if (a.size() != 2) throw ConfigError("stain alpha must be [lo, hi]");
          stain_aug.alpha = {stain::Interval{a[0], a[1]}, stain::Interval{a[0], a[1]}};
        }
        if (t.contains("beta")) {
          const auto b = t.at("beta").get<std::vector<double>>();
          if (b.size() != 2) throw ConfigError("stain beta must be [lo, hi]");
          stain_aug.beta = {stain::Interval{b[0], b[1]}, stain::Interval{b[0], b[1]}};
        }
      }
    }
    if (j.contains("experiment")) {
      const auto& v = j.at("experiment");
      n_folds = v.value("n_folds", n_folds);
      train_fraction = v.value("train_fraction", train_fraction);
      vae_split_fraction = v.value("vae_split_fraction", vae_split_fraction);
      eval_seeds = v.value("eval_seeds", eval_seeds);
      policies = v.value("policies", policies);
      fid_samples = v.value("fid_samples", fid_samples);
    }
  }

  std::string hash() const { return vae::config_hash(to_json_full()); }

  static ExperimentConfig from_profile(const std::string& name);
};

inline ExperimentConfig ExperimentConfig::from_profile(const std::string& name) {
  ExperimentConfig c;
  c.profile = name;
  if (name == "desk") {
    c.corpus.n_patients_per_cohort = 20;
    c.corpus.tiles_per_patient = 25;
    c.corpus.image_size = 64;
    c.corpus.domain_shift = {10.0, 0.18, 0.5, -6.0};
    c.vae.image_size = 64;
    c.vae.base_channels = 32;
    c.ldm.latent_size = 16;
    c.ldm.base_width = 64;
    return c;
  }
  if (name == "paper") {
    // Full-scale settings; impractical on a single desktop core but kept as
    // the faithful record of the target run.
    c.corpus.n_patients_per_cohort = 100;
    c.corpus.tiles_per_patient = 100;
    c.corpus.image_size = 256;
    c.corpus.domain_shift = {10.0, 0.18, 0.5, -6.0};
    c.vae.image_size = 256;
    c.vae.base_channels = 64;
    c.vae.codebook_size = 512;
    c.vae_train.epochs = 60;
    c.ldm.latent_size = 64;
    c.ldm.base_width = 128;
    c.ldm_train.iters = 150000;
    c.ldm_train.batch_size = 48;
    c.ldm_train.lr = 5e-5f;
    c.cls.image_size = 256;
    c.cls.patch = 16;
    c.fid_samples = 10000;
    c.policies = {"none",    "geometric", "color_jitter", "standard",    "macenko",
                  "vahadane", "ldm",       "ldm_macenko",  "ldm_vahadane"};
    return c;
  }
  throw ConfigError("unknown profile: " + name + " (expected 'desk' or 'paper')");
}

// ---------------------------------------------------------------------------
// Run ledger
// ---------------------------------------------------------------------------

struct LedgerEntry {
  std::string stage;
  std::string status;
  std::string config_hash;
  std::vector<std::string> outputs;  // run-dir relative
  json extra;
};

// Append-only JSONL record of completed stages. A stage counts as done only
// if a matching entry exists and every listed output is still on disk, so
// deleting one artifact re-runs exactly that stage.
class RunLedger {
 public:
  static RunLedger open(const fs::path& run_dir) {
    RunLedger l;
    l.root_ = run_dir;
    l.path_ = run_dir / "ledger.jsonl";
    if (fs::exists(l.path_)) {
      std::ifstream f(l.path_);
      std::string line;
      while (std::getline(f, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        LedgerEntry e;
        e.stage = j.at("stage").get<std::string>();
        e.status = j.at("status").get<std::string>();
        e.config_hash = j.at("config_hash").get<std::string>();
        e.outputs = j.value("outputs", std::vector<std::string>{});
        e.extra = j.value("extra", json::object());
        l.entries_.push_back(std::move(e));
      }
    }
    return l;
  }

  const fs::path& path() const { return path_; }
  const std::vector<LedgerEntry>& entries() const { return entries_; }

  void check_hash(const std::string& hash) const {
    for (const auto& e : entries_)
      if (e.config_hash != hash)
        throw ConfigError("run directory was produced with a different config (hash " +
                          e.config_hash + " != " + hash + "); use a fresh directory");
  }

  bool stage_done(const std::string& stage, const std::string& hash) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->stage != stage) continue;
      if (it->status != "done" || it->config_hash != hash) return false;
      for (const auto& rel : it->outputs)
        if (!fs::exists(root_ / rel)) return false;
      return true;
    }
    return false;
  }

  void record_done(const std::string& stage, const std::string& hash,
                   const std::vector<std::string>& outputs, const json& extra = json::object()) {
    LedgerEntry e{stage, "done", hash, outputs, extra};
    entries_.push_back(e);
    std::ofstream f(path_, std::ios::app);
    if (!f) throw DataError("cannot append to ledger: " + path_.string());
    ordered_json j;
    j["stage"] = e.stage;
    j["status"] = e.status;
    j["config_hash"] = e.config_hash;
    j["outputs"] = e.outputs;
    j["extra"] = e.extra;
    j["unix_time"] = static_cast<long>(std::chrono::duration_cast<std::chrono::seconds>(
                                           std::chrono::system_clock::now().time_since_epoch())
                                           .count());
    f << j.dump() << "\n";
  }

 private:
  fs::path root_, path_;
  std::vector<LedgerEntry> entries_;
};

// ---------------------------------------------------------------------------
// Metrics reports
// ---------------------------------------------------------------------------

struct MetricsReport {
  std::string run_id;
  std::string policy;
  std::string split;  // "source_cv_test" | "target_test" | caller-defined
  int fold = 0;
  uint64_t seed = 0;
  double w_s = 0.0;
  long n = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<long> support;
  std::string config_hash;
};

inline ordered_json report_to_json(const MetricsReport& r) {
  ordered_json j;
  j["run_id"] = r.run_id;
  j["policy"] = r.policy;
  j["split"] = r.split;
  j["fold"] = r.fold;
  j["seed"] = r.seed;
  j["w_s"] = r.w_s;
  j["n"] = r.n;
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["weighted_f1"] = r.weighted_f1;
  j["per_class_f1"] = r.per_class_f1;
  j["support"] = r.support;
  j["config_hash"] = r.config_hash;
  return j;
}

inline MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.run_id = j.value("run_id", "");
  r.policy = j.value("policy", "");
  r.split = j.value("split", "");
  r.fold = j.value("fold", 0);
  r.seed = j.value("seed", uint64_t{0});
  r.w_s = j.value("w_s", 0.0);
  r.n = j.value("n", 0l);
  r.accuracy = j.at("accuracy").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.weighted_f1 = j.at("weighted_f1").get<double>();
  r.per_class_f1 = j.value("per_class_f1", std::vector<double>{});
  r.support = j.value("support", std::vector<long>{});
  r.config_hash = j.value("config_hash", "");
  return r;
}

inline void write_report(const fs::path& path, const MetricsReport& r) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report: " + path.string());
  f << report_to_json(r).dump(2) << "\n";
}

inline MetricsReport read_report(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open report: " + path.string());
  json j;
  f >> j;
  return report_from_json(j);
}

inline MetricsReport make_report(const std::string& run_id, const std::string& policy,
                                 const std::string& split, int fold, uint64_t seed, double w_s,
                                 const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                 const std::string& config_hash) {
  const auto f1 = metrics::f1_scores(y_true, y_pred, corpus::kNumClasses);
  MetricsReport r;
  r.run_id = run_id;
  r.policy = policy;
  r.split = split;
  r.fold = fold;
  r.seed = seed;
  r.w_s = w_s;
  r.n = static_cast<long>(y_true.size());
  r.accuracy = f1.accuracy;
  r.macro_f1 = f1.macro_f1;
  r.weighted_f1 = f1.weighted_f1;
  r.per_class_f1 = f1.per_class;
  r.support = f1.support;
  r.config_hash = config_hash;
  return r;
}

// ---------------------------------------------------------------------------
// Small I/O helpers
// ---------------------------------------------------------------------------

inline void write_text(const fs::path& path, const std::string& s) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write: " + path.string());
  f << s;
  if (!f) throw DataError("short write: " + path.string());
}

inline std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline json stain_model_to_json(const stain::StainModel& m, const std::string& method) {
  std::vector<double> mat;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) mat.push_back(m.stain_matrix(i, j));
  return {{"method", method},
          {"stain_matrix", mat},  // row-major, H column first
          {"max_concentration", {m.max_concentration(0), m.max_concentration(1)}},
          {"converged", m.converged}};
}

inline std::pair<stain::StainModel, std::string> stain_model_from_json(const json& j) {
  stain::StainModel m;
  const auto mat = j.at("stain_matrix").get<std::vector<double>>();
  if (mat.size() != 6) throw DataError("stain_matrix must have 6 entries");
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 2; ++k) m.stain_matrix(i, k) = mat[static_cast<size_t>(i) * 2 + k];
  const auto mc = j.at("max_concentration").get<std::vector<double>>();
  if (mc.size() != 2) throw DataError("max_concentration must have 2 entries");
  m.max_concentration << mc[0], mc[1];
  m.converged = j.value("converged", true);
  return {m, j.value("method", std::string("macenko"))};
}

// ---------------------------------------------------------------------------
// Training-example helpers
// ---------------------------------------------------------------------------

inline std::vector<classifier::TrainExample> to_examples(
    const std::vector<TileRecord>& records, std::map<std::string, Image>* cache) {
  std::vector<classifier::TrainExample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (!r.label) throw DataError("tile without label in labeled pool: " + r.tile_id);
    classifier::TrainExample e;
    e.tile_id = r.tile_id;
    if (cache) {
      auto it = cache->find(r.tile_id);
      if (it == cache->end()) it = cache->emplace(r.tile_id, read_png(r.image_path)).first;
      e.image = it->second;
    } else {
      e.image = read_png(r.image_path);
    }
    e.label = static_cast<int>(*r.label);
    e.synthetic = r.synthetic;
    out.push_back(std::move(e));
  }
  return out;
}

// Counterparts enter a fold's training pool only when their source tile is in
// that pool; counterparts of validation or test tiles never train.
inline std::vector<TileRecord> counterparts_for_training(const std::vector<TileRecord>& synthetic,
                                                         const std::set<std::string>& train_ids) {
  std::vector<TileRecord> out;
  for (const auto& s : synthetic) {
    if (!s.provenance) throw DataError("synthetic tile without provenance: " + s.tile_id);
    if (train_ids.count(*s.provenance)) out.push_back(s);
  }
  return out;
}

inline std::set<std::string> tile_ids(const std::vector<TileRecord>& records) {
  std::set<std::string> out;
  for (const auto& r : records) out.insert(r.tile_id);
  return out;
}

// ---------------------------------------------------------------------------
// Report rendering (shared by the matrix and the standalone aggregator)
// ---------------------------------------------------------------------------

struct Aggregate {
  long n = 0;
  double mean = 0.0;
  double sd = 0.0;
};

inline Aggregate aggregate(const std::vector<double>& v) {
  Aggregate a;
  a.n = static_cast<long>(v.size());
  if (v.empty()) return a;
  a.mean = mean_of(v);
  a.sd = v.size() > 1 ? stddev_of(v) : 0.0;
  return a;
}

// Emits table_summary.csv/.md, table_per_class.csv, boxplot_macro_f1.csv/.png
// into out_dir. Policy order controls table rows and boxplot groups; policies
// absent from `policy_order` append in first-seen order.
inline void render_report(const std::vector<MetricsReport>& reports, const fs::path& out_dir,
                          std::vector<std::string> policy_order = {}) {
  if (reports.empty()) throw DataError("render_report: no reports");
  fs::create_directories(out_dir);

  std::vector<std::string> splits;
  for (const auto& r : reports) {
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end())
      splits.push_back(r.split);
    if (std::find(policy_order.begin(), policy_order.end(), r.policy) == policy_order.end())
      policy_order.push_back(r.policy);
  }

  auto select = [&](const std::string& policy, const std::string& split) {
    std::vector<const MetricsReport*> out;
    for (const auto& r : reports)
      if (r.policy == policy && r.split == split) out.push_back(&r);
    return out;
  };

  std::ostringstream summary_csv, per_class_csv, box_csv, md;
  summary_csv << "policy,split,n_runs,macro_f1_mean,macro_f1_sd,weighted_f1_mean,"
                 "weighted_f1_sd,accuracy_mean,accuracy_sd\n";
  per_class_csv << "policy,split,class,f1_mean,f1_sd\n";
  box_csv << "policy,split,fold,seed,macro_f1\n";

  md << "# Evaluation summary\n\n";
  for (const auto& split : splits) {
    md << "## Split: " << split << "\n\n";
    md << "| policy | runs | macro F1 | weighted F1 | accuracy |\n";
    md << "|---|---|---|---|---|\n";
    for (const auto& policy : policy_order) {
      const auto rs = select(policy, split);
      if (rs.empty()) continue;
      std::vector<double> mf, wf, acc;
      for (const auto* r : rs) {
        mf.push_back(r->macro_f1);
        wf.push_back(r->weighted_f1);
        acc.push_back(r->accuracy);
        box_csv << policy << ',' << split << ',' << r->fold << ',' << r->seed << ','
                << fmt4(r->macro_f1) << '\n';
      }
      const Aggregate am = aggregate(mf), aw = aggregate(wf), aa = aggregate(acc);
      summary_csv << policy << ',' << split << ',' << am.n << ',' << fmt4(am.mean) << ','
                  << fmt4(am.sd) << ',' << fmt4(aw.mean) << ',' << fmt4(aw.sd) << ','
                  << fmt4(aa.mean) << ',' << fmt4(aa.sd) << '\n';
      md << "| " << policy << " | " << am.n << " | " << fmt4(am.mean) << " ± " << fmt4(am.sd)
         << " | " << fmt4(aw.mean) << " ± " << fmt4(aw.sd) << " | " << fmt4(aa.mean) << " ± "
         << fmt4(aa.sd) << " |\n";
      for (int c = 0; c < corpus::kNumClasses; ++c) {
        std::vector<double> vc;
        for (const auto* r : rs)
          if (c < static_cast<int>(r->per_class_f1.size()))
            vc.push_back(r->per_class_f1[static_cast<size_t>(c)]);
        const Aggregate ac = aggregate(vc);
        per_class_csv << policy << ',' << split << ','
                      << corpus::to_string(static_cast<corpus::TileClass>(c)) << ','
                      << fmt4(ac.mean) << ',' << fmt4(ac.sd) << '\n';
      }
    }
    md << "\n";
    md << "Per-class F1 for this split is in `table_per_class.csv`.\n\n";
  }

  // Boxplot on the last split in `splits` that looks like a held-out set,
  // falling back to the first.
  std::string box_split = splits.front();
  for (const auto& s : splits)
    if (s == "target_test") box_split = s;
  std::vector<std::vector<double>> box_groups;
  std::vector<std::string> box_labels;
  for (const auto& policy : policy_order) {
    const auto rs = select(policy, box_split);
    if (rs.empty()) continue;
    std::vector<double> v;
    for (const auto* r : rs) v.push_back(r->macro_f1);
    box_groups.push_back(std::move(v));
    box_labels.push_back(policy);
  }
  if (!box_groups.empty())
    write_png(out_dir / "boxplot_macro_f1.png", viz::render_boxplot(box_groups));
  md << "## Boxplot\n\n`boxplot_macro_f1.png` shows macro F1 on split `" << box_split
     << "`; groups left to right: ";
  for (size_t i = 0; i < box_labels.size(); ++i) md << (i ? ", " : "") << box_labels[i];
  md << ". Raw values: `boxplot_macro_f1.csv`.\n";

  write_text(out_dir / "table_summary.csv", summary_csv.str());
  write_text(out_dir / "table_per_class.csv", per_class_csv.str());
  write_text(out_dir / "boxplot_macro_f1.csv", box_csv.str());
  write_text(out_dir / "report.md", md.str());
}

// ---------------------------------------------------------------------------
// Prediction-file evaluation
// ---------------------------------------------------------------------------

// CSV with a header whose first two columns are tile_id,pred; labels come
// from the manifest, which must contain every predicted tile.
inline MetricsReport evaluate_predictions(const fs::path& pred_csv, const fs::path& manifest_path,
                                          const std::string& split_name = "eval") {
  const auto records = corpus::load_manifest(manifest_path, false);
  std::map<std::string, int> label_of;
  for (const auto& r : records)
    if (r.label) label_of[r.tile_id] = static_cast<int>(*r.label);

  std::ifstream f(pred_csv);
  if (!f) throw DataError("cannot open predictions: " + pred_csv.string());
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty predictions file: " + pred_csv.string());
  std::vector<int> y_true, y_pred;
  int line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    if (c1 == std::string::npos)
      throw DataError(pred_csv.string() + ":" + std::to_string(line_no) + ": expected CSV");
    const std::string id = line.substr(0, c1);
    const auto c2 = line.find(',', c1 + 1);
    const std::string pred_s = line.substr(c1 + 1, c2 == std::string::npos ? std::string::npos
                                                                           : c2 - c1 - 1);
    int pred;
    try {
      pred = std::stoi(pred_s);
    } catch (const std::exception&) {
      throw DataError(pred_csv.string() + ":" + std::to_string(line_no) +
                      ": prediction is not an integer: " + pred_s);
    }
    const auto it = label_of.find(id);
    if (it == label_of.end())
      throw DataError("predicted tile missing from manifest or unlabeled: " + id);
    y_true.push_back(it->second);
    y_pred.push_back(pred);
  }
  if (y_true.empty()) throw DataError("no predictions in " + pred_csv.string());
  return make_report("eval", "external", split_name, 0, 0, 0.0, y_true, y_pred, "");
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

struct RunPaths {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path corpus_dir() const { return root / "corpus"; }
  fs::path manifest() const { return corpus_dir() / "manifest.jsonl"; }
  fs::path pool(const std::string& name) const {
    return corpus_dir() / "pools" / (name + ".jsonl");
  }
  fs::path embeddings_dir() const { return root / "embeddings"; }
  fs::path real_embed() const { return embeddings_dir() / "real.f32"; }
  fs::path real_sidecar() const { return embeddings_dir() / "real.json"; }
  fs::path synth_embed() const { return embeddings_dir() / "synthetic.f32"; }
  fs::path synth_sidecar() const { return embeddings_dir() / "synthetic.json"; }
  fs::path models_dir() const { return root / "models"; }
  fs::path vae_ckpt() const { return models_dir() / "vae.ckpt"; }
  fs::path vae_log() const { return models_dir() / "vae_log.csv"; }
  fs::path vae_stats() const { return models_dir() / "vae_stats.json"; }
  fs::path latent_stats() const { return models_dir() / "latent_stats.json"; }
  fs::path ldm_ckpt() const { return models_dir() / "ldm.ckpt"; }
  fs::path ldm_log() const { return models_dir() / "ldm_log.csv"; }
  fs::path synth_dir() const { return root / "synthetic"; }
  fs::path synth_manifest() const { return synth_dir() / "manifest.jsonl"; }
  fs::path runs_dir() const { return root / "runs"; }
  fs::path run_dir(const std::string& run_id) const { return runs_dir() / run_id; }
  fs::path reports_dir() const { return root / "reports"; }
};

struct MatrixRun {
  std::string run_id;
  std::string policy;
  int fold = 0;
  uint64_t seed = 0;
  double w_s = 0.0;
  MetricsReport source;
  MetricsReport target;
};

struct MatrixResult {
  std::vector<MatrixRun> runs;
  json summary;
  fs::path reports_dir;
};

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, const fs::path& run_dir, bool resume)
      : cfg_(std::move(cfg)), resume_(resume) {
    cfg_.resolve();
    hash_ = cfg_.hash();
    paths_.root = run_dir;
    fs::create_directories(run_dir);
    if (fs::exists(paths_.config())) {
      std::ifstream f(paths_.config());
      json prev;
      f >> prev;
      if (vae::config_hash(prev) != hash_)
        throw ConfigError("run directory holds a different config; use a fresh directory");
    } else {
      write_text(paths_.config(), cfg_.to_json_full().dump(2) + "\n");
    }
    ledger_ = RunLedger::open(run_dir);
    ledger_.check_hash(hash_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const RunPaths& paths() const { return paths_; }
  const std::string& config_hash() const { return hash_; }
  RunLedger& ledger() { return ledger_; }

  const std::vector<TileRecord>& labeled_source() const { return labeled_source_; }
  const std::vector<TileRecord>& unlabeled_source() const { return unlabeled_source_; }
  const std::vector<TileRecord>& unlabeled_target() const { return unlabeled_target_; }
  const std::vector<TileRecord>& target_test() const { return target_test_; }
  const std::vector<TileRecord>& synthetic() const { return synthetic_; }
  const std::vector<TileRecord>& generative_pool() const { return ldm_pool_; }
  vae::VqVae& vae_model() { return *vae_; }
  diffusion::Ldm& ldm_model() { return *ldm_; }
  const diffusion::LatentStats& latent_stats() const { return lstats_; }

  const Eigen::VectorXf& embedding_of(const std::string& tile_id) const {
    const auto it = embed_of_.find(tile_id);
    if (it == embed_of_.end()) throw DataError("no embedding for tile " + tile_id);
    return it->second;
  }

  // Stages 1..5: corpus, embeddings, autoencoder, diffusion, counterparts.
  void prepare(const std::function<void(const std::string&)>& log = {}) {
    prepare_until("generate", log);
  }

  // Runs (or skips, via the ledger) every stage up to and including `stage`.
  void prepare_until(const std::string& stage,
                     const std::function<void(const std::string&)>& log = {}) {
    log_ = log;
    static const std::vector<std::string> order = {"synth-data", "embed", "train-vae",
                                                   "train-ldm", "generate"};
    if (std::find(order.begin(), order.end(), stage) == order.end())
      throw ConfigError("unknown stage: " + stage);
    stage_corpus();
    if (stage == "synth-data") return;
    stage_embed();
    if (stage == "embed") return;
    stage_vae();
    if (stage == "train-vae") return;
    stage_ldm();
    if (stage == "train-ldm") return;
    stage_generate();
  }

  // One synthetic counterpart of `r`, conditioned on the tile's frozen
  // embedding plus the requested cohort and the tile's own preparation. The
  // record inherits the label, is flagged synthetic, and points back to its
  // source tile; the cohort field holds the metadata actually used.
  TileRecord generate_one(const TileRecord& r, corpus::Cohort cohort,
                          const diffusion::SampleParams& sp, uint64_t seed,
                          const fs::path& image_path) {
    if (!vae_ || !ldm_) throw TrainError("generate: models are not prepared");
    const auto ns = diffusion::NoiseSchedule::linear(cfg_.ldm.timesteps, cfg_.ldm.beta_start,
                                                     cfg_.ldm.beta_end);
    const auto cond = condition_for(r, cohort);
    Rng rng(seed);
    const nn::Arr z = diffusion::sample_latent(*ldm_, ns, &cond, sp, rng);
    const Image img = vae_->decode_latent(lstats_.invert(z));
    TileRecord s;
    s.tile_id = "syn_" + r.tile_id;
    s.patient_id = r.patient_id;
    s.cohort = cohort;
    s.tissue_prep = r.tissue_prep;
    s.label = r.label;
    s.synthetic = true;
    s.provenance = r.tile_id;
    s.image_path = image_path;
    write_png(image_path, img);
    return s;
  }

  // Counterparts for a whole pool; per-tile seeds derive from (root_seed,
  // tile id) so regeneration of any subset is reproducible.
  std::vector<TileRecord> generate_counterparts(const std::vector<TileRecord>& sources,
                                                const fs::path& out_root,
                                                const diffusion::SampleParams& sp,
                                                const std::string& cohort_mode,
                                                uint64_t root_seed) {
    if (cohort_mode != "source" && cohort_mode != "target")
      throw ConfigError("counterpart cohort must be 'source' or 'target'");
    fs::create_directories(out_root / "images");
    std::vector<TileRecord> out;
    for (const auto& r : sources) {
      const corpus::Cohort cohort =
          cohort_mode == "target" ? corpus::Cohort::target : r.cohort;
      out.push_back(generate_one(r, cohort, sp, derive_seed(root_seed, "gen:" + r.tile_id),
                                 out_root / "images" / ("syn_" + r.tile_id + ".png")));
      if (log_ && out.size() % 25 == 0)
        log_("generate: " + std::to_string(out.size()) + "/" + std::to_string(sources.size()));
    }
    corpus::write_manifest(out, out_root / "manifest.jsonl");
    return out;
  }

  std::vector<splits::FoldSplit> cv_folds() const {
    return splits::make_cv_splits(labeled_source_, cfg_.n_folds, derive_seed(cfg_.seed, "cv"),
                                  cfg_.train_fraction);
  }

  // Trains and evaluates one (policy, fold, seed) cell; honors the ledger.
  MatrixRun run_classifier_cell(const std::string& policy_name, const splits::FoldSplit& fold,
                                uint64_t eval_seed, double w_s) {
    const classifier::AugPolicy policy = classifier::aug_policy_from_string(policy_name);
    const std::string run_id =
        policy_name + "_f" + std::to_string(fold.fold) + "_s" + std::to_string(eval_seed);
    const fs::path dir = paths_.run_dir(run_id);
    const std::string train_stage = "train-classifier:" + run_id;
    const std::string eval_stage = "evaluate:" + run_id;
    const std::string rel = "runs/" + run_id + "/";

    MatrixRun out;
    out.run_id = run_id;
    out.policy = policy_name;
    out.fold = fold.fold;
    out.seed = eval_seed;
    out.w_s = classifier::policy_uses_synthetic(policy) ? w_s : 0.0;

    if (resume_ && ledger_.stage_done(train_stage, hash_) &&
        ledger_.stage_done(eval_stage, hash_)) {
      out.source = read_report(dir / "metrics_source_cv.json");
      out.target = read_report(dir / "metrics_target.json");
      if (log_) log_("skip " + run_id + " (ledger)");
      return out;
    }
    fs::create_directories(dir);

    // Pools. Real examples first, synthetic appended, so endpoint weights
    // reproduce the real-only ordering exactly.
    std::vector<TileRecord> train_recs = fold.train;
    if (classifier::policy_uses_synthetic(policy)) {
      const auto extra = counterparts_for_training(synthetic_, tile_ids(fold.train));
      if (extra.empty())
        throw ConfigError("policy " + policy_name + " needs generated counterparts; none found");
      train_recs.insert(train_recs.end(), extra.begin(), extra.end());
    }
    const auto train_exs = to_examples(train_recs, &image_cache_);
    const auto val_exs = to_examples(fold.val, &image_cache_);

    classifier::ClassifierConfig ccfg = cfg_.cls;
    ccfg.init_seed = derive_seed(eval_seed, "cls_init_f" + std::to_string(fold.fold));
    VitClassifierPtr model = std::make_unique<classifier::VitClassifier>(ccfg);
    const std::string chash = vae::config_hash(json(ccfg));

    classifier::ClassifierTrainParams tp;
    tp.max_epochs = cfg_.cls_train.max_epochs;
    tp.batch_size = cfg_.cls_train.batch_size;
    tp.lr = cfg_.cls_train.lr;
    tp.weight_decay = cfg_.cls_train.weight_decay;
    tp.patience = cfg_.cls_train.patience;
    tp.policy = policy;
    tp.w_synth = out.w_s;
    tp.jitter = cfg_.jitter;
    tp.stain_params = cfg_.stain_aug;
    tp.seed = derive_seed(eval_seed, "cls_f" + std::to_string(fold.fold));

    std::ostringstream log_csv;
    log_csv << "epoch,train_loss,val_loss,val_macro_f1\n";
    const auto result = classifier::train_classifier(
        *model, train_exs, val_exs, tp, [&](const classifier::ClassifierEpochStats& st) {
          log_csv << st.epoch << ',' << fmt4(st.train_loss) << ',' << fmt4(st.val_loss) << ','
                  << fmt4(st.val_macro_f1) << '\n';
        });
    write_text(dir / "train_log.csv", log_csv.str());
    checkpoint::Meta meta;
    meta.kind = "classifier";
    meta.config_hash = chash;
    meta.step = result.epochs_ran;
    meta.extra = {{"run_id", run_id}, {"policy", policy_name}, {"w_s", out.w_s}};
    checkpoint::save(dir / "classifier.ckpt", meta, model->params(), false);
    ledger_.record_done(train_stage, hash_,
                        {rel + "classifier.ckpt", rel + "train_log.csv"},
                        {{"epochs_ran", result.epochs_ran},
                         {"best_val_loss", result.best_val_loss},
                         {"stopped_early", result.stopped_early},
                         {"stain_fallbacks", result.stain_fallbacks}});

    out.source = evaluate_split(*model, run_id, policy_name, fold.fold, eval_seed, out.w_s,
                                fold.test, "source_cv_test", dir / "predictions_source_cv.csv");
    out.target = evaluate_split(*model, run_id, policy_name, fold.fold, eval_seed, out.w_s,
                                target_test_, "target_test", dir / "predictions_target.csv");
    write_report(dir / "metrics_source_cv.json", out.source);
    write_report(dir / "metrics_target.json", out.target);
    ledger_.record_done(eval_stage, hash_,
                        {rel + "metrics_source_cv.json", rel + "metrics_target.json",
                         rel + "predictions_source_cv.csv", rel + "predictions_target.csv"});
    if (log_)
      log_(run_id + ": target macro F1 " + fmt4(out.target.macro_f1) + ", source cv " +
           fmt4(out.source.macro_f1));
    return out;
  }

  // Full policy x fold x seed matrix plus aggregation and report artifacts.
  MatrixResult run_matrix() {
    const auto folds = cv_folds();
    const json audit = leakage_audit(folds);

    double ws = cfg_.w_synth;
    bool any_synth_policy = false;
    for (const auto& p : cfg_.policies)
      any_synth_policy |= classifier::policy_uses_synthetic(classifier::aug_policy_from_string(p));
    json ws_block = {{"w_s", ws}, {"grid_search", false}};
    if (cfg_.ws_grid_search && any_synth_policy) {
      const auto grid = grid_search(folds.front(), cfg_.eval_seeds.front());
      ws = grid.at("best_w_s").get<double>();
      ws_block = grid;
      ws_block["grid_search"] = true;
    }

    MatrixResult res;
    for (const auto& policy : cfg_.policies)
      for (const auto& fold : folds)
        for (const uint64_t seed : cfg_.eval_seeds)
          res.runs.push_back(run_classifier_cell(policy, fold, seed, ws));

    // Aggregation.
    std::vector<MetricsReport> reports;
    for (const auto& r : res.runs) {
      reports.push_back(r.source);
      reports.push_back(r.target);
    }
    fs::create_directories(paths_.reports_dir());
    render_report(reports, paths_.reports_dir(), cfg_.policies);

    json summary;
    summary["config_hash"] = hash_;
    summary["n_runs"] = res.runs.size();
    summary["w_synth"] = ws_block;
    summary["policy_means"] = policy_means(res.runs);
    summary["paired_tests"] = paired_tests(res.runs);
    summary["fid"] = fid_block();
    summary["leakage_audit"] = audit;
    projection_block(summary);
    write_text(paths_.reports_dir() / "summary.json", summary.dump(2) + "\n");
    write_text(paths_.reports_dir() / "leakage_audit.json", audit.dump(2) + "\n");

    res.summary = summary;
    res.reports_dir = paths_.reports_dir();
    return res;
  }

  // Re-derivable hygiene checks; violations is empty on a clean run.
  json leakage_audit(const std::vector<splits::FoldSplit>& folds) const {
    json violations = json::array();

    const auto target_ids = tile_ids(target_test_);
    std::set<std::string> ldm_patients;
    for (const auto& r : ldm_pool_) ldm_patients.insert(r.patient_id);
    for (const auto& r : target_test_)
      if (ldm_patients.count(r.patient_id))
        violations.push_back("held-out target patient " + r.patient_id +
                             " appears in the generative training pool");

    for (const auto& fold : folds) {
      const auto train_ids = tile_ids(fold.train);
      const auto val_ids = tile_ids(fold.val);
      const auto test_ids = tile_ids(fold.test);
      for (const auto& r : fold.val)
        if (r.synthetic)
          violations.push_back("synthetic tile " + r.tile_id + " in fold " +
                               std::to_string(fold.fold) + " val split");
      for (const auto& r : fold.test)
        if (r.synthetic)
          violations.push_back("synthetic tile " + r.tile_id + " in fold " +
                               std::to_string(fold.fold) + " test split");
      for (const auto& s : counterparts_for_training(synthetic_, train_ids)) {
        if (val_ids.count(*s.provenance) || test_ids.count(*s.provenance) ||
            target_ids.count(*s.provenance))
          violations.push_back("counterpart " + s.tile_id +
                               " trains on a held-out source tile in fold " +
                               std::to_string(fold.fold));
      }
    }
    for (const auto& r : target_test_)
      if (r.synthetic) violations.push_back("synthetic tile " + r.tile_id + " in target test");

    return {{"violations", violations},
            {"n_folds", folds.size()},
            {"n_synthetic", synthetic_.size()},
            {"n_generative_patients", ldm_patients.size()}};
  }

  // Embedding matrix for a record list, rows in record order.
  Eigen::MatrixXf embedding_rows(const std::vector<TileRecord>& records) const {
    Eigen::MatrixXf m(static_cast<Eigen::Index>(records.size()), embedder::kDim);
    for (size_t i = 0; i < records.size(); ++i)
      m.row(static_cast<Eigen::Index>(i)) = embedding_of(records[i].tile_id).transpose();
    return m;
  }

 private:
  using VitClassifierPtr = std::unique_ptr<classifier::VitClassifier>;

  void note(const std::string& s) {
    if (log_) log_(s);
  }

  void load_pools() {
    labeled_source_ = corpus::load_manifest(paths_.pool("labeled_source"));
    unlabeled_source_ = corpus::load_manifest(paths_.pool("unlabeled_source"));
    unlabeled_target_ = corpus::load_manifest(paths_.pool("unlabeled_target"));
    target_test_ = corpus::load_manifest(paths_.pool("target_test"));
    ldm_pool_ = unlabeled_source_;
    if (cfg_.ldm_domains == "both")
      ldm_pool_.insert(ldm_pool_.end(), unlabeled_target_.begin(), unlabeled_target_.end());
  }

  void stage_corpus() {
    const std::vector<std::string> outs = {
        "corpus/manifest.jsonl", "corpus/pools/labeled_source.jsonl",
        "corpus/pools/unlabeled_source.jsonl", "corpus/pools/unlabeled_target.jsonl",
        "corpus/pools/target_test.jsonl"};
    if (resume_ && ledger_.stage_done("synth-data", hash_)) {
      load_pools();
      note("skip synth-data (ledger)");
      return;
    }
    note("synth-data: generating corpus");
    const auto gen = corpus::generate_corpus(cfg_.corpus, paths_.corpus_dir());
    labeled_source_ = gen.labeled_source;
    unlabeled_source_ = gen.unlabeled_source;
    unlabeled_target_ = gen.unlabeled_target;
    target_test_ = gen.target_test;
    ldm_pool_ = unlabeled_source_;
    if (cfg_.ldm_domains == "both")
      ldm_pool_.insert(ldm_pool_.end(), unlabeled_target_.begin(), unlabeled_target_.end());
    ledger_.record_done("synth-data", hash_, outs, {{"n_tiles", gen.all.size()}});
  }

  std::vector<TileRecord> all_real_records() const {
    std::vector<TileRecord> all = labeled_source_;
    all.insert(all.end(), unlabeled_source_.begin(), unlabeled_source_.end());
    all.insert(all.end(), unlabeled_target_.begin(), unlabeled_target_.end());
    all.insert(all.end(), target_test_.begin(), target_test_.end());
    return all;
  }

  void load_embedding_file(const fs::path& mat_path, const fs::path& sidecar_path) {
    std::ifstream f(sidecar_path);
    if (!f) throw DataError("cannot open embedding sidecar: " + sidecar_path.string());
    json side;
    f >> side;
    if (side.at("extractor_version").get<std::string>() != embedder::kVersion)
      throw DataError("embedding extractor version mismatch in " + sidecar_path.string());
    const auto ids = side.at("tile_ids").get<std::vector<std::string>>();
    const Eigen::MatrixXf m = embedder::read_matrix_f32(mat_path, embedder::kDim);
    if (m.rows() != static_cast<Eigen::Index>(ids.size()))
      throw DataError("embedding matrix row count mismatch: " + mat_path.string());
    for (size_t i = 0; i < ids.size(); ++i)
      embed_of_[ids[i]] = m.row(static_cast<Eigen::Index>(i)).transpose();
  }

  void write_embedding_file(const std::vector<TileRecord>& records, const fs::path& mat_path,
                            const fs::path& sidecar_path) {
    Eigen::MatrixXf m(static_cast<Eigen::Index>(records.size()), embedder::kDim);
    std::vector<std::string> ids;
    for (size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      const Eigen::VectorXf v = embedder::embed(read_png(r.image_path)).values;
      m.row(static_cast<Eigen::Index>(i)) = v.transpose();
      embed_of_[r.tile_id] = v;
      ids.push_back(r.tile_id);
    }
    embedder::write_matrix_f32(mat_path, m);
    const json side = {{"dim", embedder::kDim},
                       {"extractor_version", embedder::kVersion},
                       {"tile_ids", ids}};
    write_text(sidecar_path, side.dump(2) + "\n");
  }

  void stage_embed() {
    const std::vector<std::string> outs = {"embeddings/real.f32", "embeddings/real.json"};
    fs::create_directories(paths_.embeddings_dir());
    if (resume_ && ledger_.stage_done("embed", hash_)) {
      load_embedding_file(paths_.real_embed(), paths_.real_sidecar());
      note("skip embed (ledger)");
      return;
    }
    note("embed: computing tile embeddings");
    write_embedding_file(all_real_records(), paths_.real_embed(), paths_.real_sidecar());
    ledger_.record_done("embed", hash_, outs, {{"n_tiles", embed_of_.size()}});
  }

  void stage_vae() {
    const std::vector<std::string> outs = {"models/vae.ckpt", "models/vae_log.csv",
                                           "models/vae_stats.json"};
    fs::create_directories(paths_.models_dir());
    vae_ = std::make_unique<vae::VqVae>(cfg_.vae);
    const std::string vh = vae::config_hash(json(cfg_.vae));
    if (resume_ && ledger_.stage_done("train-vae", hash_)) {
      checkpoint::load(paths_.vae_ckpt(), vae_->params(), "vae", vh);
      note("skip train-vae (ledger)");
      return;
    }

    auto [train_recs, val_recs] =
        corpus::split_unlabeled(ldm_pool_, cfg_.vae_split_fraction, derive_seed(cfg_.seed, "vae_split"));
    std::vector<Image> train_imgs, val_imgs;
    for (const auto& r : train_recs) train_imgs.push_back(read_png(r.image_path));
    for (const auto& r : val_recs) val_imgs.push_back(read_png(r.image_path));

    vae::VaeTrainParams p;
    p.epochs = cfg_.vae_train.epochs;
    p.batch_size = cfg_.vae_train.batch_size;
    p.lr = cfg_.vae_train.lr;
    p.seed = derive_seed(cfg_.seed, "vae");
    if (resume_ && fs::exists(paths_.vae_ckpt())) {
      const auto meta = checkpoint::load(paths_.vae_ckpt(), vae_->params(), "vae", vh);
      p.start_epoch = static_cast<int>(meta.step);
      note("train-vae: resuming at epoch " + std::to_string(p.start_epoch));
    }

    std::ofstream log_csv(paths_.vae_log(), p.start_epoch > 0 ? std::ios::app : std::ios::out);
    if (p.start_epoch == 0) log_csv << "epoch,train_loss,val_psnr,codebook_usage\n";
    double last_psnr = 0.0;
    note("train-vae: " + std::to_string(train_imgs.size()) + " train / " +
         std::to_string(val_imgs.size()) + " val tiles");
    vae::train_vae(*vae_, train_imgs, val_imgs, p, [&](const vae::VaeEpochStats& st) {
      log_csv << st.epoch << ',' << fmt4(st.train_loss) << ',' << fmt4(st.val_psnr) << ','
              << fmt4(st.codebook_usage) << '\n';
      log_csv.flush();
      last_psnr = st.val_psnr;
      checkpoint::Meta meta;
      meta.kind = "vae";
      meta.config_hash = vh;
      meta.step = st.epoch + 1;
      meta.extra = {{"val_psnr", st.val_psnr}};
      checkpoint::save(paths_.vae_ckpt(), meta, vae_->params());
      note("train-vae epoch " + std::to_string(st.epoch) + ": loss " + fmt4(st.train_loss) +
           ", val psnr " + fmt4(st.val_psnr));
    });
    const json stats = {{"val_psnr", last_psnr},
                        {"epochs", p.epochs},
                        {"n_train", train_imgs.size()},
                        {"n_val", val_imgs.size()}};
    write_text(paths_.vae_stats(), stats.dump(2) + "\n");
    ledger_.record_done("train-vae", hash_, outs, stats);
  }

  // Tiles outside the run's embedding table (external manifests) are
  // embedded on the fly with the same frozen extractor.
  diffusion::TileCondition condition_for(const TileRecord& r, corpus::Cohort cohort) const {
    diffusion::TileCondition c;
    const auto it = embed_of_.find(r.tile_id);
    c.embedding = it != embed_of_.end() ? it->second : embedder::embed(read_png(r.image_path)).values;
    c.cohort = static_cast<int>(cohort);
    c.prep = static_cast<int>(r.tissue_prep);
    return c;
  }

  void stage_ldm() {
    const std::vector<std::string> outs = {"models/ldm.ckpt", "models/ldm_log.csv",
                                           "models/latent_stats.json"};
    ldm_ = std::make_unique<diffusion::Ldm>(cfg_.ldm);
    const std::string lh = vae::config_hash(json(cfg_.ldm));
    if (resume_ && ledger_.stage_done("train-ldm", hash_)) {
      checkpoint::load(paths_.ldm_ckpt(), ldm_->params(), "ldm", lh);
      std::ifstream f(paths_.latent_stats());
      json j;
      f >> j;
      lstats_ = diffusion::LatentStats::from_json(j);
      note("skip train-ldm (ledger)");
      return;
    }

    note("train-ldm: encoding " + std::to_string(ldm_pool_.size()) + " latents");
    std::vector<nn::Arr> raw;
    std::vector<diffusion::TileCondition> conds;
    for (const auto& r : ldm_pool_) {
      raw.push_back(vae_->encode_latent(read_png(r.image_path)));
      conds.push_back(condition_for(r, r.cohort));
    }
    lstats_ = diffusion::LatentStats::compute(raw, cfg_.ldm.latent_channels);
    write_text(paths_.latent_stats(), lstats_.to_json().dump(2) + "\n");
    std::vector<nn::Arr> latents;
    latents.reserve(raw.size());
    for (const auto& z : raw) latents.push_back(lstats_.apply(z));

    diffusion::LdmTrainParams p;
    p.epochs = cfg_.ldm_train.epochs;
    p.batch_size = cfg_.ldm_train.batch_size;
    p.lr = cfg_.ldm_train.lr;
    p.cond_dropout = cfg_.ldm_train.cond_dropout;
    p.seed = derive_seed(cfg_.seed, "ldm");
    if (cfg_.ldm_train.iters > 0) {
      const long bpe = (static_cast<long>(latents.size()) + p.batch_size - 1) / p.batch_size;
      p.epochs = static_cast<int>((cfg_.ldm_train.iters + bpe - 1) / bpe);
    }
    if (resume_ && fs::exists(paths_.ldm_ckpt())) {
      const auto meta = checkpoint::load(paths_.ldm_ckpt(), ldm_->params(), "ldm", lh);
      p.start_epoch = static_cast<int>(meta.step);
      note("train-ldm: resuming at epoch " + std::to_string(p.start_epoch));
    }

    const auto ns = diffusion::NoiseSchedule::linear(cfg_.ldm.timesteps, cfg_.ldm.beta_start,
                                                     cfg_.ldm.beta_end);
    std::ofstream log_csv(paths_.ldm_log(), p.start_epoch > 0 ? std::ios::app : std::ios::out);
    if (p.start_epoch == 0) log_csv << "epoch,train_loss\n";
    diffusion::train_ldm(*ldm_, ns, latents, conds, p, [&](const diffusion::LdmEpochStats& st) {
      log_csv << st.epoch << ',' << fmt4(st.train_loss) << '\n';
      log_csv.flush();
      checkpoint::Meta meta;
      meta.kind = "ldm";
      meta.config_hash = lh;
      meta.step = st.epoch + 1;
      checkpoint::save(paths_.ldm_ckpt(), meta, ldm_->params());
      note("train-ldm epoch " + std::to_string(st.epoch) + ": loss " + fmt4(st.train_loss));
    });
    ledger_.record_done("train-ldm", hash_, outs,
                        {{"epochs", p.epochs}, {"n_latents", latents.size()}});
  }

  void stage_generate() {
    const std::vector<std::string> outs = {"synthetic/manifest.jsonl", "embeddings/synthetic.f32",
                                           "embeddings/synthetic.json"};
    if (resume_ && ledger_.stage_done("generate", hash_)) {
      synthetic_ = corpus::load_manifest(paths_.synth_manifest());
      load_embedding_file(paths_.synth_embed(), paths_.synth_sidecar());
      note("skip generate (ledger)");
      return;
    }
    note("generate: " + std::to_string(labeled_source_.size()) + " counterparts (cohort " +
         cfg_.counterpart_cohort + ")");
    synthetic_ = generate_counterparts(labeled_source_, paths_.synth_dir(), cfg_.sample,
                                       cfg_.counterpart_cohort, cfg_.seed);
    write_embedding_file(synthetic_, paths_.synth_embed(), paths_.synth_sidecar());
    ledger_.record_done("generate", hash_, outs,
                        {{"counterpart_cohort", cfg_.counterpart_cohort},
                         {"n", synthetic_.size()},
                         {"guidance_scale", cfg_.sample.guidance_scale},
                         {"n_steps", cfg_.sample.n_steps}});
  }

  MetricsReport evaluate_split(const classifier::VitClassifier& model, const std::string& run_id,
                               const std::string& policy, int fold, uint64_t seed, double w_s,
                               const std::vector<TileRecord>& records, const std::string& split,
                               const fs::path& pred_csv) {
    std::vector<Image> images;
    std::vector<int> y_true;
    for (const auto& r : records) {
      if (!r.label) throw DataError("unlabeled tile in evaluation split: " + r.tile_id);
      auto it = image_cache_.find(r.tile_id);
      if (it == image_cache_.end())
        it = image_cache_.emplace(r.tile_id, read_png(r.image_path)).first;
      images.push_back(it->second);
      y_true.push_back(static_cast<int>(*r.label));
    }
    const Eigen::MatrixXf proba = model.predict_proba(images);
    std::vector<int> y_pred(records.size());
    std::ostringstream csv;
    csv << "tile_id,label,pred,p_good,p_intermediate,p_poor,p_nontumor\n";
    for (size_t i = 0; i < records.size(); ++i) {
      const auto row = proba.row(static_cast<Eigen::Index>(i));
      int best = 0;
      for (int c = 1; c < corpus::kNumClasses; ++c)
        if (row(c) > row(best)) best = c;
      y_pred[i] = best;
      csv << records[i].tile_id << ',' << y_true[i] << ',' << best;
      for (int c = 0; c < corpus::kNumClasses; ++c) csv << ',' << fmt4(row(c));
      csv << '\n';
    }
    write_text(pred_csv, csv.str());
    return make_report(run_id, policy, split, fold, seed, w_s, y_true, y_pred, hash_);
  }

  json policy_means(const std::vector<MatrixRun>& runs) const {
    json out = json::object();
    std::vector<std::string> order;
    for (const auto& r : runs)
      if (std::find(order.begin(), order.end(), r.policy) == order.end())
        order.push_back(r.policy);
    for (const auto& policy : order) {
      std::vector<double> src, tgt;
      for (const auto& r : runs)
        if (r.policy == policy) {
          src.push_back(r.source.macro_f1);
          tgt.push_back(r.target.macro_f1);
        }
      const Aggregate as = aggregate(src), at = aggregate(tgt);
      out[policy] = {{"n", as.n},
                     {"source_cv_macro_f1_mean", as.mean},
                     {"source_cv_macro_f1_sd", as.sd},
                     {"target_macro_f1_mean", at.mean},
                     {"target_macro_f1_sd", at.sd}};
    }
    return out;
  }

  // Paired comparisons of each policy against the no-augmentation baseline,
  // paired by (fold, seed). Effect sizes are recorded, not asserted.
  json paired_tests(const std::vector<MatrixRun>& runs) const {
    json out = json::object();
    auto values = [&](const std::string& policy, bool target) {
      std::vector<std::pair<std::pair<int, uint64_t>, double>> v;
      for (const auto& r : runs)
        if (r.policy == policy)
          v.push_back({{r.fold, r.seed}, target ? r.target.macro_f1 : r.source.macro_f1});
      std::sort(v.begin(), v.end());
      std::vector<double> out_v;
      for (const auto& [k, x] : v) out_v.push_back(x);
      return out_v;
    };
    const auto base_t = values("none", true);
    const auto base_s = values("none", false);
    if (base_t.empty()) return out;
    std::set<std::string> seen;
    for (const auto& r : runs) {
      if (r.policy == "none" || !seen.insert(r.policy).second) continue;
      const auto pt = values(r.policy, true);
      const auto ps = values(r.policy, false);
      if (pt.size() != base_t.size() || pt.size() < 2) continue;
      json block;
      for (const auto& [label, a, b] :
           {std::tuple{std::string("target"), pt, base_t},
            std::tuple{std::string("source_cv"), ps, base_s}}) {
        std::vector<double> diff(a.size());
        for (size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
        const double md = mean_of(diff);
        const double sd = diff.size() > 1 ? stddev_of(diff) : 0.0;
        const auto tt = metrics::paired_t_test(a, b);
        block[label] = {{"mean_diff", md},
                        {"sd_diff", sd},
                        {"cohen_d", sd > 0 ? md / sd : 0.0},
                        {"t", tt.t},
                        {"df", tt.df},
                        {"p", tt.p}};
      }
      out[r.policy + "_vs_none"] = block;
    }
    return out;
  }

  // Seeded subsample of up to n rows, proportional across cohorts.
  std::vector<TileRecord> proportional_sample(const std::vector<TileRecord>& records, int n,
                                              uint64_t seed) const {
    if (static_cast<int>(records.size()) <= n) return records;
    std::map<int, std::vector<TileRecord>> by_cohort;
    for (const auto& r : records) by_cohort[static_cast<int>(r.cohort)].push_back(r);
    std::vector<TileRecord> out;
    Rng rng(seed);
    for (auto& [c, group] : by_cohort) {
      const auto want = static_cast<size_t>(std::lround(
          static_cast<double>(n) * static_cast<double>(group.size()) /
          static_cast<double>(records.size())));
      rng.shuffle(group);
      for (size_t i = 0; i < std::min(want, group.size()); ++i) out.push_back(group[i]);
    }
    return out;
  }

  json fid_block() const {
    std::vector<TileRecord> source_real = labeled_source_;
    source_real.insert(source_real.end(), unlabeled_source_.begin(), unlabeled_source_.end());
    const auto syn = proportional_sample(synthetic_, cfg_.fid_samples, derive_seed(cfg_.seed, "fid_syn"));
    const auto src = proportional_sample(source_real, cfg_.fid_samples, derive_seed(cfg_.seed, "fid_src"));
    const auto tgt = proportional_sample(unlabeled_target_, cfg_.fid_samples,
                                         derive_seed(cfg_.seed, "fid_tgt"));
    std::string warn;
    const double fid_syn = metrics::fid_from_samples(
        embedding_rows(syn).cast<double>().eval(), embedding_rows(tgt).cast<double>().eval(), &warn);
    const double fid_src = metrics::fid_from_samples(
        embedding_rows(src).cast<double>().eval(), embedding_rows(tgt).cast<double>().eval(), &warn);
    json out = {{"synthetic_vs_target", fid_syn},
                {"source_vs_target", fid_src},
                {"n_synthetic", syn.size()},
                {"n_source", src.size()},
                {"n_target", tgt.size()}};
    if (!warn.empty()) out["warning"] = warn;
    return out;
  }

  // 2D projection of source/target/synthetic embeddings; CSV plus scatter.
  void projection_block(json& summary) const {
    std::vector<TileRecord> source_real = labeled_source_;
    source_real.insert(source_real.end(), unlabeled_source_.begin(), unlabeled_source_.end());
    const int cap = std::min(cfg_.fid_samples, 400);
    const auto src = proportional_sample(source_real, cap, derive_seed(cfg_.seed, "proj_src"));
    const auto tgt = proportional_sample(unlabeled_target_, cap, derive_seed(cfg_.seed, "proj_tgt"));
    const auto syn = proportional_sample(synthetic_, cap, derive_seed(cfg_.seed, "proj_syn"));

    std::vector<TileRecord> all = src;
    all.insert(all.end(), tgt.begin(), tgt.end());
    all.insert(all.end(), syn.begin(), syn.end());
    if (all.size() < 3) return;
    const Eigen::MatrixXd pts = metrics::project_2d(embedding_rows(all));

    std::vector<int> groups;
    std::ostringstream csv;
    csv << "tile_id,x,y,cohort,synthetic\n";
    Eigen::Vector2d mean_src = Eigen::Vector2d::Zero(), mean_tgt = Eigen::Vector2d::Zero(),
                    mean_syn = Eigen::Vector2d::Zero();
    for (size_t i = 0; i < all.size(); ++i) {
      const auto& r = all[i];
      const int group = r.synthetic ? 2 : (r.cohort == corpus::Cohort::source ? 0 : 1);
      groups.push_back(group);
      const auto row = pts.row(static_cast<Eigen::Index>(i));
      csv << r.tile_id << ',' << fmt4(row(0)) << ',' << fmt4(row(1)) << ','
          << corpus::to_string(r.cohort) << ',' << (r.synthetic ? 1 : 0) << '\n';
      if (group == 0) mean_src += row.transpose();
      if (group == 1) mean_tgt += row.transpose();
      if (group == 2) mean_syn += row.transpose();
    }
    if (!src.empty()) mean_src /= static_cast<double>(src.size());
    if (!tgt.empty()) mean_tgt /= static_cast<double>(tgt.size());
    if (!syn.empty()) mean_syn /= static_cast<double>(syn.size());
    write_text(paths_.reports_dir() / "projection.csv", csv.str());
    write_png(paths_.reports_dir() / "projection.png", viz::render_scatter(pts, groups));

    // Position of the synthetic cloud along the source-to-target axis;
    // 0 sits on the source mean, 1 on the target mean.
    const Eigen::Vector2d axis = mean_tgt - mean_src;
    const double denom = axis.squaredNorm();
    const double t = denom > 0 ? axis.dot(mean_syn - mean_src) / denom : 0.0;
    summary["projection"] = {{"groups", {"source_real", "target_real", "synthetic"}},
                             {"synthetic_position_on_source_target_axis", t}};
  }

  // Validation-selected synthetic weight on one fold; ties take the smaller
  // weight because the grid is scanned in ascending order with a strict <.
  json grid_search(const splits::FoldSplit& fold, uint64_t eval_seed) {
    std::vector<TileRecord> train_recs = fold.train;
    const auto extra = counterparts_for_training(synthetic_, tile_ids(fold.train));
    train_recs.insert(train_recs.end(), extra.begin(), extra.end());
    const auto train_exs = to_examples(train_recs, &image_cache_);
    const auto val_exs = to_examples(fold.val, &image_cache_);

    classifier::ClassifierConfig ccfg = cfg_.cls;
    ccfg.init_seed = derive_seed(eval_seed, "ws_grid_init");
    classifier::ClassifierTrainParams tp;
    tp.max_epochs = cfg_.cls_train.max_epochs;
    tp.batch_size = cfg_.cls_train.batch_size;
    tp.lr = cfg_.cls_train.lr;
    tp.weight_decay = cfg_.cls_train.weight_decay;
    tp.patience = cfg_.cls_train.patience;
    tp.policy = classifier::AugPolicy::ldm;
    tp.jitter = cfg_.jitter;
    tp.stain_params = cfg_.stain_aug;
    tp.seed = derive_seed(eval_seed, "ws_grid");

    std::vector<double> grid = cfg_.ws_grid;
    std::sort(grid.begin(), grid.end());
    const auto r = grid_search_ws(ccfg, train_exs, val_exs, tp, grid);
    return r;
  }

 public:
  // Standalone weight search: trains one model per grid point and picks the
  // highest validation macro F1; ascending scan keeps the smaller weight on
  // ties.
  static json grid_search_ws(const classifier::ClassifierConfig& ccfg,
                             const std::vector<classifier::TrainExample>& train_exs,
                             const std::vector<classifier::TrainExample>& val_exs,
                             classifier::ClassifierTrainParams tp, std::vector<double> grid) {
    if (grid.empty()) throw ConfigError("grid_search_ws: empty grid");
    if (!classifier::policy_uses_synthetic(tp.policy))
      throw ConfigError("grid_search_ws needs a synthetic-aware policy");
    std::sort(grid.begin(), grid.end());
    std::vector<int> y_true;
    std::vector<Image> val_imgs;
    for (const auto& e : val_exs) {
      y_true.push_back(e.label);
      val_imgs.push_back(e.image);
    }
    double best_w = grid.front(), best_f1 = -1.0;
    json points = json::array();
    for (const double w : grid) {
      classifier::VitClassifier model(ccfg);
      tp.w_synth = w;
      classifier::train_classifier(model, train_exs, val_exs, tp);
      const auto pred = model.predict(val_imgs);
      const double f1 = metrics::f1_scores(y_true, pred, ccfg.n_classes).macro_f1;
      points.push_back({{"w_s", w}, {"val_macro_f1", f1}});
      if (f1 > best_f1) {
        best_f1 = f1;
        best_w = w;
      }
    }
    return {{"best_w_s", best_w}, {"best_val_macro_f1", best_f1}, {"points", points}};
  }

 private:
  ExperimentConfig cfg_;
  bool resume_;
  std::string hash_;
  RunPaths paths_;
  RunLedger ledger_;
  std::function<void(const std::string&)> log_;

  std::vector<TileRecord> labeled_source_, unlabeled_source_, unlabeled_target_, target_test_;
  std::vector<TileRecord> ldm_pool_;  // generative training pool per ldm_domains
  std::vector<TileRecord> synthetic_;
  std::map<std::string, Eigen::VectorXf> embed_of_;
  std::map<std::string, Image> image_cache_;

  std::unique_ptr<vae::VqVae> vae_;
  std::unique_ptr<diffusion::Ldm> ldm_;
  diffusion::LatentStats lstats_;
};

inline MatrixResult run_pipeline(const ExperimentConfig& cfg, const fs::path& run_dir, bool resume,
                                 const std::function<void(const std::string&)>& log = {}) {
  Pipeline p(cfg, run_dir, resume);
  p.prepare(log);
  return p.run_matrix();
}

}  // namespace tilediff::pipeline
