// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver. Exit codes: 0 success, 2 configuration error,
// 3 data error, 4 runtime/training failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tilediff/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tilediff;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string profile = "desk";
  bool profile_set = false;
  std::optional<uint64_t> seed;
  bool resume = false;
};

pipeline::ExperimentConfig make_config(const CommonOpts& o) {
  nlohmann::json file_cfg;
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path);
    if (!f) throw DataError("cannot open config file: " + o.config_path);
    try {
      f >> file_cfg;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
  }
  // The profile named in the config supplies defaults; an explicit --profile
  // flag wins over it.
  std::string profile = file_cfg.value("profile", o.profile);
  if (o.profile_set) profile = o.profile;
  auto cfg = pipeline::ExperimentConfig::from_profile(profile);
  cfg.apply(file_cfg);
  cfg.profile = profile;
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

void log_line(const std::string& s) { std::cout << s << "\n" << std::flush; }

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no .png files in " + dir.string());
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Latent-diffusion domain adaptation for tile classification"};
  app.require_subcommand(1);
  app.fallthrough();

  CommonOpts common;
  app.add_option("--config", common.config_path, "Experiment config JSON");
  auto* profile_opt = app.add_option("--profile", common.profile,
                                     "Config profile: desk or paper")
                          ->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", common.seed, "Root experiment seed");
  app.add_flag("--resume", common.resume, "Skip stages already recorded in the run ledger");

  std::string run_dir;

  // Staged pipeline subcommands share the run-directory layout.
  auto add_stage = [&](const std::string& name, const std::string& desc) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--run", run_dir, "Run directory")->required();
    return sub;
  };
  auto* sc_synth = add_stage("synth-data", "Generate the two-cohort tile corpus");
  auto* sc_embed = add_stage("embed", "Compute frozen tile embeddings for the corpus");
  auto* sc_vae = add_stage("train-vae", "Train the latent autoencoder");
  auto* sc_ldm = add_stage("train-ldm", "Train the conditional diffusion model");
  auto* sc_exp = add_stage("experiment", "Run the full pipeline and evaluation matrix");

  auto* sc_gen = add_stage("generate", "Sample synthetic counterparts of labeled tiles");
  std::string gen_out, gen_cohort;
  double gen_guidance = -1.0;
  int gen_steps = -1;
  sc_gen->add_option("--out", gen_out, "Write manifest and images here instead of the run dir");
  sc_gen->add_option("--cohort", gen_cohort, "Condition cohort override: source or target")
      ->check(CLI::IsMember({"source", "target"}));
  sc_gen->add_option("--guidance-scale", gen_guidance, "Guidance scale override");
  sc_gen->add_option("--steps", gen_steps, "Sampling step count override");

  auto* sc_cls = add_stage("train-classifier", "Train and evaluate one classifier cell");
  std::string cls_policy = "none";
  int cls_fold = 0;
  std::optional<uint64_t> cls_seed;
  double cls_ws = -1.0;
  sc_cls->add_option("--policy", cls_policy, "Augmentation policy");
  sc_cls->add_option("--fold", cls_fold, "Cross-validation fold index");
  sc_cls->add_option("--eval-seed", cls_seed, "Evaluation seed for this cell");
  sc_cls->add_option("--ws", cls_ws, "Synthetic-loss weight override");

  auto* sc_stain = app.add_subcommand("stain", "Stain separation and augmentation");
  std::string stain_mode, stain_in, stain_out, stain_method = "macenko";
  uint64_t stain_seed = 0;
  std::vector<double> stain_alpha = {0.8, 1.2}, stain_beta = {-0.2, 0.2};
  sc_stain->add_option("mode", stain_mode, "separate or augment")
      ->required()
      ->check(CLI::IsMember({"separate", "augment"}));
  sc_stain->add_option("--in", stain_in, "Input directory of .png tiles")->required();
  sc_stain->add_option("--out", stain_out, "Output directory")->required();
  sc_stain->add_option("--method", stain_method, "macenko or vahadane")
      ->check(CLI::IsMember({"macenko", "vahadane"}));
  sc_stain->add_option("--stain-seed", stain_seed, "Augmentation seed");
  sc_stain->add_option("--alpha", stain_alpha, "Concentration scale interval lo hi")
      ->expected(2);
  sc_stain->add_option("--beta", stain_beta, "Concentration shift interval lo hi")->expected(2);

  auto* sc_emb1 = app.add_subcommand("embed-files", "Embed a folder of .png tiles");
  std::string embf_in, embf_out;
  sc_emb1->add_option("--in", embf_in, "Input directory of .png tiles")->required();
  sc_emb1->add_option("--out", embf_out, "Output matrix path (.f32; sidecar .json)")->required();

  auto* sc_eval = app.add_subcommand("evaluate", "Score a predictions file against a manifest");
  std::string eval_pred, eval_manifest, eval_out, eval_split = "eval";
  sc_eval->add_option("--predictions", eval_pred, "CSV with tile_id,pred columns")->required();
  sc_eval->add_option("--manifest", eval_manifest, "Labeled manifest JSONL")->required();
  sc_eval->add_option("--out", eval_out, "Metrics report JSON path")->required();
  sc_eval->add_option("--split", eval_split, "Split name recorded in the report");

  auto* sc_rep = app.add_subcommand("report", "Aggregate metrics reports into tables and plots");
  std::string rep_in, rep_out;
  sc_rep->add_option("--in", rep_in, "Directory scanned recursively for metrics JSONs")
      ->required();
  sc_rep->add_option("--out", rep_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // malformed invocation counts as a configuration failure
  }
  common.profile_set = profile_opt->count() > 0;

  if (sc_synth->parsed() || sc_embed->parsed() || sc_vae->parsed() || sc_ldm->parsed()) {
    const std::string stage = sc_synth->parsed()  ? "synth-data"
                              : sc_embed->parsed() ? "embed"
                              : sc_vae->parsed()   ? "train-vae"
                                                   : "train-ldm";
    pipeline::Pipeline p(make_config(common), run_dir, common.resume);
    p.prepare_until(stage, log_line);
    log_line(stage + ": done");
    return 0;
  }

  if (sc_gen->parsed()) {
    auto cfg = make_config(common);
    pipeline::Pipeline p(cfg, run_dir, true);  // reuse trained stages
    if (gen_out.empty() && gen_cohort.empty() && gen_guidance < 0 && gen_steps < 0) {
      p.prepare_until("generate", log_line);
      log_line("generate: done");
      return 0;
    }
    // Overrides sample into a separate output tree without touching the
    // run's recorded artifacts.
    if (gen_out.empty())
      throw ConfigError("generate overrides need --out to keep the run directory immutable");
    p.prepare_until("train-ldm", log_line);
    diffusion::SampleParams sp = cfg.sample;
    if (gen_guidance >= 0) sp.guidance_scale = static_cast<float>(gen_guidance);
    if (gen_steps > 0) sp.n_steps = gen_steps;
    const std::string cohort = gen_cohort.empty() ? cfg.counterpart_cohort : gen_cohort;
    const auto recs = p.generate_counterparts(p.labeled_source(), gen_out, sp, cohort,
                                              common.seed.value_or(cfg.seed));
    log_line("generate: wrote " + std::to_string(recs.size()) + " counterparts to " + gen_out);
    return 0;
  }

  if (sc_cls->parsed()) {
    auto cfg = make_config(common);
    pipeline::Pipeline p(cfg, run_dir, true);
    p.prepare(log_line);
    const auto folds = p.cv_folds();
    if (cls_fold < 0 || cls_fold >= static_cast<int>(folds.size()))
      throw ConfigError("fold index out of range");
    const double ws = cls_ws >= 0 ? cls_ws : cfg.w_synth;
    const uint64_t es = cls_seed.value_or(cfg.eval_seeds.front());
    const auto cell =
        p.run_classifier_cell(cls_policy, folds[static_cast<size_t>(cls_fold)], es, ws);
    log_line(cell.run_id + ": source cv macro F1 " + pipeline::fmt4(cell.source.macro_f1) +
             ", target macro F1 " + pipeline::fmt4(cell.target.macro_f1));
    return 0;
  }

  if (sc_exp->parsed()) {
    const auto result = pipeline::run_pipeline(make_config(common), run_dir, common.resume,
                                               log_line);
    log_line("experiment: " + std::to_string(result.runs.size()) + " runs; reports in " +
             result.reports_dir.string());
    return 0;
  }

  if (sc_stain->parsed()) {
    const auto method = stain_method == "macenko" ? stain::SeparationMethod::macenko
                                                  : stain::SeparationMethod::vahadane;
    fs::create_directories(stain_out);
    int failures = 0;
    for (const auto& path : png_files(stain_in)) {
      const Image img = read_png(path);
      if (stain_mode == "separate") {
        try {
          const auto model = stain::separate(img, method);
          const auto j = pipeline::stain_model_to_json(model, stain_method);
          pipeline::write_text(fs::path(stain_out) / (path.stem().string() + ".json"),
                               j.dump(2) + "\n");
        } catch (const stain::DegenerateStainPlane& e) {
          ++failures;
          std::cerr << path.filename().string() << ": " << e.what() << "\n";
        }
      } else {
        stain::AugmentParams ap;
        ap.alpha = {stain::Interval{stain_alpha[0], stain_alpha[1]},
                    stain::Interval{stain_alpha[0], stain_alpha[1]}};
        ap.beta = {stain::Interval{stain_beta[0], stain_beta[1]},
                   stain::Interval{stain_beta[0], stain_beta[1]}};
        ap.rng_seed = derive_seed(stain_seed, path.filename().string());
        try {
          write_png(fs::path(stain_out) / path.filename(),
                    stain::stain_augment(img, method, ap));
        } catch (const stain::DegenerateStainPlane& e) {
          ++failures;
          // Pass the tile through untouched; augmentation must not drop data.
          write_png(fs::path(stain_out) / path.filename(), img);
          std::cerr << path.filename().string() << ": " << e.what() << " (copied)\n";
        }
      }
    }
    log_line("stain " + stain_mode + ": done (" + std::to_string(failures) + " fallbacks)");
    return 0;
  }

  if (sc_emb1->parsed()) {
    const auto files = png_files(embf_in);
    Eigen::MatrixXf m(static_cast<Eigen::Index>(files.size()), embedder::kDim);
    std::vector<std::string> ids;
    for (size_t i = 0; i < files.size(); ++i) {
      m.row(static_cast<Eigen::Index>(i)) = embedder::embed(read_png(files[i])).values;
      ids.push_back(files[i].stem().string());
    }
    embedder::write_matrix_f32(embf_out, m);
    const nlohmann::json side = {{"dim", embedder::kDim},
                                 {"extractor_version", embedder::kVersion},
                                 {"tile_ids", ids}};
    pipeline::write_text(fs::path(embf_out).replace_extension(".json"), side.dump(2) + "\n");
    log_line("embed-files: " + std::to_string(files.size()) + " tiles -> " + embf_out);
    return 0;
  }

  if (sc_eval->parsed()) {
    const auto report = pipeline::evaluate_predictions(eval_pred, eval_manifest, eval_split);
    pipeline::write_report(eval_out, report);
    log_line("evaluate: macro F1 " + pipeline::fmt4(report.macro_f1) + ", accuracy " +
             pipeline::fmt4(report.accuracy));
    return 0;
  }

  if (sc_rep->parsed()) {
    std::vector<pipeline::MetricsReport> reports;
    for (const auto& e : fs::recursive_directory_iterator(rep_in)) {
      if (!e.is_regular_file() || e.path().extension() != ".json") continue;
      std::ifstream f(e.path());
      nlohmann::json j;
      try {
        f >> j;
      } catch (const nlohmann::json::exception&) {
        continue;
      }
      if (j.is_object() && j.contains("macro_f1") && j.contains("split"))
        reports.push_back(pipeline::report_from_json(j));
    }
    if (reports.empty()) throw DataError("no metrics reports under " + rep_in);
    pipeline::render_report(reports, rep_out);
    log_line("report: aggregated " + std::to_string(reports.size()) + " reports into " + rep_out);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
