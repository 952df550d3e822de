// SPDX-License-Identifier: Apache-2.0
//
// Two-domain tile corpus: a procedural generator with controllable domain
// shift plus a JSONL manifest loader for external image folders.
//
// Each of the four classes is a distinct blob-field motif (density,
// anisotropy, ring/lumen structure) rendered as hematoxylin/eosin
// concentration maps and mixed through the reference stain matrix, so stain
// separation is exactly invertible on generated tiles. The target cohort
// additionally passes through an appearance transform (hue rotation, stain
// intensity scaling, blur, brightness offset).

#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tilediff/common.hpp"
#include "tilediff/image.hpp"
#include "tilediff/stain.hpp"

namespace tilediff::corpus {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

enum class Cohort { source = 0, target = 1 };
enum class TissuePrep { ffpe = 0, frozen = 1 };  // matches the one-hot encoding
enum class TileClass { good = 0, intermediate = 1, poor = 2, nontumor = 3 };

constexpr int kNumClasses = 4;

inline const char* to_string(Cohort c) { return c == Cohort::source ? "source" : "target"; }
inline const char* to_string(TissuePrep t) { return t == TissuePrep::ffpe ? "ffpe" : "frozen"; }
inline const char* to_string(TileClass c) {
  switch (c) {
    case TileClass::good: return "good";
    case TileClass::intermediate: return "intermediate";
    case TileClass::poor: return "poor";
    default: return "nontumor";
  }
}

inline Cohort cohort_from_string(const std::string& s) {
  if (s == "source") return Cohort::source;
  if (s == "target") return Cohort::target;
  throw DataError("unknown cohort: " + s);
}

inline TissuePrep prep_from_string(const std::string& s) {
  if (s == "ffpe" || s == "0") return TissuePrep::ffpe;
  if (s == "frozen" || s == "1") return TissuePrep::frozen;
  throw DataError("unknown tissue_prep: " + s);
}

inline TileClass class_from_string(const std::string& s) {
  if (s == "good") return TileClass::good;
  if (s == "intermediate") return TileClass::intermediate;
  if (s == "poor") return TileClass::poor;
  if (s == "nontumor") return TileClass::nontumor;
  throw DataError("unknown class label: " + s);
}

struct TileRecord {
  std::string tile_id;
  std::string patient_id;
  Cohort cohort = Cohort::source;
  TissuePrep tissue_prep = TissuePrep::ffpe;
  std::optional<TileClass> label;
  bool synthetic = false;
  std::optional<std::string> provenance;  // source tile_id, synthetic tiles only
  fs::path image_path;                    // absolute in memory, relative on disk
  std::optional<fs::path> embedding_path; // precomputed-embedding hook

  bool operator==(const TileRecord&) const = default;
};

struct DomainShift {
  double hue_shift_degrees = 0.0;
  double stain_intensity_scale = 0.0;  // concentrations scaled by (1 + this)
  double blur_sigma = 0.0;
  double brightness_offset = 0.0;

  bool is_zero() const {
    return hue_shift_degrees == 0.0 && stain_intensity_scale == 0.0 &&
           blur_sigma == 0.0 && brightness_offset == 0.0;
  }
};

struct CorpusSpec {
  int n_patients_per_cohort = 20;
  int tiles_per_patient = 25;
  int image_size = 64;
  // Defaults follow the source-cohort class proportions of the downstream
  // labeled set (good/intermediate/poor/nontumor).
  std::array<double, 4> class_distribution{0.1729, 0.3450, 0.2729, 0.2092};
  DomainShift domain_shift;
  uint64_t rng_seed = 0;
  // Fraction of each cohort's patients assigned to the labeled pool; the
  // rest form the unlabeled pool used for diffusion training.
  double labeled_patient_fraction = 0.4;

  void validate() const {
    if (n_patients_per_cohort <= 0) throw ConfigError("n_patients_per_cohort must be positive");
    if (tiles_per_patient <= 0) throw ConfigError("tiles_per_patient must be positive");
    if (image_size < 16) throw ConfigError("image_size must be at least 16");
    double sum = 0.0;
    for (double p : class_distribution) {
      if (p < 0.0) throw ConfigError("class_distribution entries must be >= 0");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("class_distribution must sum to 1");
    if (labeled_patient_fraction <= 0.0 || labeled_patient_fraction >= 1.0)
      throw ConfigError("labeled_patient_fraction must be in (0,1)");
  }
};

inline void to_json(nlohmann::json& j, const DomainShift& d) {
  j = {{"hue_shift_degrees", d.hue_shift_degrees},
       {"stain_intensity_scale", d.stain_intensity_scale},
       {"blur_sigma", d.blur_sigma},
       {"brightness_offset", d.brightness_offset}};
}

inline void from_json(const nlohmann::json& j, DomainShift& d) {
  d.hue_shift_degrees = j.value("hue_shift_degrees", d.hue_shift_degrees);
  d.stain_intensity_scale = j.value("stain_intensity_scale", d.stain_intensity_scale);
  d.blur_sigma = j.value("blur_sigma", d.blur_sigma);
  d.brightness_offset = j.value("brightness_offset", d.brightness_offset);
}

inline void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"n_patients_per_cohort", s.n_patients_per_cohort},
       {"tiles_per_patient", s.tiles_per_patient},
       {"image_size", s.image_size},
       {"class_distribution", s.class_distribution},
       {"domain_shift", s.domain_shift},
       {"rng_seed", s.rng_seed},
       {"labeled_patient_fraction", s.labeled_patient_fraction}};
}

inline void from_json(const nlohmann::json& j, CorpusSpec& s) {
  s.n_patients_per_cohort = j.value("n_patients_per_cohort", s.n_patients_per_cohort);
  s.tiles_per_patient = j.value("tiles_per_patient", s.tiles_per_patient);
  s.image_size = j.value("image_size", s.image_size);
  s.class_distribution = j.value("class_distribution", s.class_distribution);
  s.domain_shift = j.value("domain_shift", s.domain_shift);
  s.rng_seed = j.value("rng_seed", s.rng_seed);
  s.labeled_patient_fraction = j.value("labeled_patient_fraction", s.labeled_patient_fraction);
}

// ---------------------------------------------------------------------------
// Procedural renderer
// ---------------------------------------------------------------------------

namespace detail {

struct Motif {
  int n_lo, n_hi;
  double r_lo, r_hi;       // blob radius at 64px scale
  double elong_lo, elong_hi;
  double ring_prob;        // lumen frequency
  double wall_lo, wall_hi; // ring wall thickness
  double amp_lo, amp_hi;   // hematoxylin amplitude
  double e_base;           // stroma (eosin) background level
  double cyto;             // eosin halo strength around nuclei
};

inline const Motif& motif_for(TileClass c) {
  static const Motif good{4, 6, 9.0, 14.0, 1.0, 1.25, 1.0, 1.7, 2.7, 0.55, 0.80, 0.25, 0.25};
  static const Motif inter{9, 13, 4.5, 7.0, 1.0, 1.4, 0.6, 1.2, 2.0, 0.60, 0.90, 0.30, 0.35};
  static const Motif poor{24, 32, 2.2, 4.2, 1.2, 1.9, 0.05, 1.0, 1.6, 0.75, 1.05, 0.33, 0.45};
  static const Motif nont{4, 8, 1.5, 3.0, 1.0, 1.3, 0.0, 1.0, 1.5, 0.35, 0.55, 0.48, 0.15};
  switch (c) {
    case TileClass::good: return good;
    case TileClass::intermediate: return inter;
    case TileClass::poor: return poor;
    default: return nont;
  }
}

struct PatientProfile {
  double h_scale, e_scale;
  double brightness;
  TissuePrep prep;
};

inline PatientProfile patient_profile(uint64_t corpus_seed, const std::string& patient_id) {
  Rng rng(derive_seed(corpus_seed, "patient:" + patient_id));
  PatientProfile p;
  p.h_scale = rng.uniform(0.88, 1.12);
  p.e_scale = rng.uniform(0.88, 1.12);
  p.brightness = rng.uniform(-5.0, 5.0);
  p.prep = rng.uniform() < 0.5 ? TissuePrep::ffpe : TissuePrep::frozen;
  return p;
}

inline Image render_tile(const CorpusSpec& spec, TileClass cls,
                         const PatientProfile& patient, Cohort cohort,
                         uint64_t tile_seed) {
  Rng rng(tile_seed);
  const int n = spec.image_size;
  const double q = n / 64.0;
  const Motif& m = motif_for(cls);

  ImageF conc(n, n, 2);  // channel 0 = hematoxylin, 1 = eosin

  // Stroma background: base level plus three low-frequency cosine waves.
  {
    double fx[3], fy[3], ph[3], am[3];
    for (int k = 0; k < 3; ++k) {
      fx[k] = rng.uniform(0.5, 3.0);
      fy[k] = rng.uniform(0.5, 3.0);
      ph[k] = rng.uniform(0.0, 2.0 * M_PI);
      am[k] = rng.uniform(0.02, 0.06);
    }
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double v = m.e_base;
        for (int k = 0; k < 3; ++k)
          v += am[k] * std::cos(2.0 * M_PI * (fx[k] * x + fy[k] * y) / n + ph[k]);
        conc.at(x, y, 1) = static_cast<float>(std::max(0.0, v));
      }
  }

  // Blob field.
  const int n_blobs = static_cast<int>(rng.uniform_int(m.n_lo, m.n_hi));
  for (int b = 0; b < n_blobs; ++b) {
    const double cx = rng.uniform(0.0, n);
    const double cy = rng.uniform(0.0, n);
    const double r = rng.uniform(m.r_lo, m.r_hi) * q;
    const double elong = rng.uniform(m.elong_lo, m.elong_hi);
    const double theta = rng.uniform(0.0, M_PI);
    const bool ring = rng.uniform() < m.ring_prob;
    const double wall = rng.uniform(m.wall_lo, m.wall_hi) * q;
    const double amp = rng.uniform(m.amp_lo, m.amp_hi);

    const double ct = std::cos(theta), st = std::sin(theta);
    const double reach = ring ? r + 3.0 * wall : 2.5 * r;
    const int x0 = std::max(0, static_cast<int>(cx - reach));
    const int x1 = std::min(n - 1, static_cast<int>(cx + reach));
    const int y0 = std::max(0, static_cast<int>(cy - reach));
    const int y1 = std::min(n - 1, static_cast<int>(cy + reach));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * ct + dy * st) / elong;
        const double v = (-dx * st + dy * ct) * elong;
        const double d = std::sqrt(u * u + v * v);
        double h;
        if (ring) {
          h = amp * std::exp(-0.5 * (d - r) * (d - r) / (wall * wall));
        } else {
          h = amp * std::exp(-0.5 * d * d / (0.35 * r * 0.35 * r));
        }
        conc.at(x, y, 0) += static_cast<float>(h);
        // Eosin cytoplasm halo around the structure.
        conc.at(x, y, 1) += static_cast<float>(
            m.cyto * amp * std::exp(-0.5 * d * d / (0.8 * r * 0.8 * r)) * 0.5);
      }
  }

  // Fine texture noise on both channels.
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      conc.at(x, y, 0) += static_cast<float>(0.015 * rng.normal());
      conc.at(x, y, 1) += static_cast<float>(0.015 * rng.normal());
    }

  const double sis =
      cohort == Cohort::target ? 1.0 + spec.domain_shift.stain_intensity_scale : 1.0;
  const auto stains = stain::reference_he_matrix();
  Image img(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double ch = std::clamp(conc.at(x, y, 0) * patient.h_scale * sis, 0.0, 3.0);
      const double ce = std::clamp(conc.at(x, y, 1) * patient.e_scale * sis, 0.0, 3.0);
      for (int c = 0; c < 3; ++c) {
        const double od = stains(c, 0) * ch + stains(c, 1) * ce;
        img.at(x, y, c) = clamp_u8(stain::intensity_from_od(od));
      }
    }

  // Tissue-preparation appearance: frozen sections are slightly blurred
  // and paler than FFPE.
  if (patient.prep == TissuePrep::frozen) {
    img = gaussian_blur(img, 0.35);
    img = add_brightness_offset(img, 4.0);
  }
  img = add_brightness_offset(img, patient.brightness);

  if (cohort == Cohort::target) {
    const auto& ds = spec.domain_shift;
    if (ds.hue_shift_degrees != 0.0) img = hue_rotate(img, ds.hue_shift_degrees);
    if (ds.blur_sigma > 0.0) img = gaussian_blur(img, ds.blur_sigma);
    if (ds.brightness_offset != 0.0) img = add_brightness_offset(img, ds.brightness_offset);
  }
  return img;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Manifest I/O (JSON lines, one TileRecord per line)
// ---------------------------------------------------------------------------

inline ordered_json record_to_json(const TileRecord& r, const fs::path& base_dir) {
  ordered_json j;
  j["tile_id"] = r.tile_id;
  j["patient_id"] = r.patient_id;
  j["cohort"] = to_string(r.cohort);
  j["tissue_prep"] = to_string(r.tissue_prep);
  if (r.label) j["label"] = to_string(*r.label);
  j["synthetic"] = r.synthetic;
  if (r.provenance) j["provenance"] = *r.provenance;
  j["image_path"] = fs::relative(r.image_path, base_dir).generic_string();
  if (r.embedding_path)
    j["embedding_path"] = fs::relative(*r.embedding_path, base_dir).generic_string();
  return j;
}

inline TileRecord record_from_json(const ordered_json& j, const fs::path& base_dir) {
  TileRecord r;
  r.tile_id = j.at("tile_id").get<std::string>();
  r.patient_id = j.at("patient_id").get<std::string>();
  r.cohort = cohort_from_string(j.at("cohort").get<std::string>());
  if (j.at("tissue_prep").is_number())
    r.tissue_prep = static_cast<TissuePrep>(j.at("tissue_prep").get<int>());
  else
    r.tissue_prep = prep_from_string(j.at("tissue_prep").get<std::string>());
  if (j.contains("label") && !j.at("label").is_null())
    r.label = class_from_string(j.at("label").get<std::string>());
  r.synthetic = j.value("synthetic", false);
  if (j.contains("provenance")) r.provenance = j.at("provenance").get<std::string>();
  r.image_path = base_dir / fs::path(j.at("image_path").get<std::string>());
  if (j.contains("embedding_path"))
    r.embedding_path = base_dir / fs::path(j.at("embedding_path").get<std::string>());
  return r;
}

inline void write_manifest(const std::vector<TileRecord>& records, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open manifest for write: " + path.string());
  const fs::path base = path.parent_path();
  for (const auto& r : records) f << record_to_json(r, base).dump() << "\n";
  if (!f) throw DataError("short write: " + path.string());
}

// Validates TileRecord invariants, including referential integrity of the
// image files. Parse failures report the 1-based line number.
inline std::vector<TileRecord> load_manifest(const fs::path& path,
                                             bool check_images = true) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path.string());
  const fs::path base = path.parent_path();
  std::vector<TileRecord> records;
  std::set<std::string> seen_ids;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
      records.push_back(record_from_json(j, base));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": malformed manifest line: " + e.what());
    }
    const TileRecord& r = records.back();
    if (!seen_ids.insert(r.tile_id).second)
      throw DataError("duplicate tile_id in manifest: " + r.tile_id);
    if (r.synthetic && (!r.label || !r.provenance))
      throw DataError("synthetic tile missing label or provenance: " + r.tile_id);
    if (check_images && !fs::exists(r.image_path))
      throw DataError("missing image file for tile " + r.tile_id + ": " +
                      r.image_path.string());
  }
  return records;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GeneratedCorpus {
  fs::path root;
  std::vector<TileRecord> all;  // fully labeled ground truth
  std::vector<TileRecord> unlabeled_source;
  std::vector<TileRecord> unlabeled_target;
  std::vector<TileRecord> labeled_source;
  std::vector<TileRecord> target_test;  // held-out labeled target pool
};

inline TileClass draw_class(const std::array<double, 4>& dist, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (int c = 0; c < 4; ++c) {
    acc += dist[static_cast<size_t>(c)];
    if (u < acc) return static_cast<TileClass>(c);
  }
  return TileClass::nontumor;
}

inline GeneratedCorpus generate_corpus(const CorpusSpec& spec, const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "pools", ec);
  if (!fs::exists(out_dir / "images"))
    throw DataError("cannot create output directory: " + out_dir.string());

  GeneratedCorpus out;
  out.root = out_dir;

  for (Cohort cohort : {Cohort::source, Cohort::target}) {
    const std::string prefix = cohort == Cohort::source ? "src" : "tgt";
    // Patient pool partition: labeled-pool patients are disjoint from the
    // unlabeled (diffusion-training) patients by construction.
    std::vector<int> patient_idx(static_cast<size_t>(spec.n_patients_per_cohort));
    for (int i = 0; i < spec.n_patients_per_cohort; ++i) patient_idx[static_cast<size_t>(i)] = i;
    Rng pool_rng(derive_seed(spec.rng_seed, "pools:" + prefix));
    pool_rng.shuffle(patient_idx);
    const int n_labeled = std::max(
        1, static_cast<int>(std::lround(spec.labeled_patient_fraction *
                                        spec.n_patients_per_cohort)));
    std::set<int> labeled_pool(patient_idx.begin(), patient_idx.begin() + n_labeled);

    for (int p = 0; p < spec.n_patients_per_cohort; ++p) {
      char pbuf[32];
      std::snprintf(pbuf, sizeof(pbuf), "%s_p%03d", prefix.c_str(), p);
      const std::string patient_id = pbuf;
      const auto profile = detail::patient_profile(spec.rng_seed, patient_id);
      const bool in_labeled_pool = labeled_pool.count(p) > 0;

      for (int t = 0; t < spec.tiles_per_patient; ++t) {
        char tbuf[48];
        std::snprintf(tbuf, sizeof(tbuf), "%s_t%03d", patient_id.c_str(), t);
        const std::string tile_id = tbuf;
        const uint64_t tile_seed = derive_seed(spec.rng_seed, tile_id);
        Rng tile_rng(tile_seed);
        const TileClass cls = draw_class(spec.class_distribution, tile_rng);

        const Image img = detail::render_tile(spec, cls, profile, cohort,
                                              derive_seed(tile_seed, "render"));
        const fs::path img_path = out_dir / "images" / (tile_id + ".png");
        write_png(img_path, img);

        TileRecord r;
        r.tile_id = tile_id;
        r.patient_id = patient_id;
        r.cohort = cohort;
        r.tissue_prep = profile.prep;
        r.label = cls;
        r.synthetic = false;
        r.image_path = img_path;
        out.all.push_back(r);

        if (in_labeled_pool) {
          if (cohort == Cohort::source) out.labeled_source.push_back(r);
          else out.target_test.push_back(r);
        } else {
          TileRecord u = r;
          u.label.reset();  // SSDA: diffusion pools carry no labels
          if (cohort == Cohort::source) out.unlabeled_source.push_back(u);
          else out.unlabeled_target.push_back(u);
        }
      }
    }
  }

  write_manifest(out.all, out_dir / "manifest.jsonl");
  write_manifest(out.unlabeled_source, out_dir / "pools" / "unlabeled_source.jsonl");
  write_manifest(out.unlabeled_target, out_dir / "pools" / "unlabeled_target.jsonl");
  write_manifest(out.labeled_source, out_dir / "pools" / "labeled_source.jsonl");
  write_manifest(out.target_test, out_dir / "pools" / "target_test.jsonl");
  return out;
}

// ---------------------------------------------------------------------------
// Patient-level 80/20 split of an unlabeled manifest
// ---------------------------------------------------------------------------

inline std::vector<std::string> distinct_patients(const std::vector<TileRecord>& records) {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.patient_id);
  return {s.begin(), s.end()};
}

inline std::pair<std::vector<TileRecord>, std::vector<TileRecord>> split_unlabeled(
    const std::vector<TileRecord>& records, double train_fraction, uint64_t seed) {
  if (records.empty()) throw DataError("cannot split an empty manifest");
  auto patients = distinct_patients(records);
  if (patients.size() < 2) throw DataError("patient-level split needs at least 2 patients");
  Rng rng(seed);
  rng.shuffle(patients);
  const auto n = static_cast<long>(patients.size());
  long n_train = std::lround(train_fraction * static_cast<double>(n));
  n_train = std::clamp(n_train, 1l, n - 1);  // both sides stay non-empty
  std::set<std::string> train_set(patients.begin(), patients.begin() + n_train);
  std::pair<std::vector<TileRecord>, std::vector<TileRecord>> out;
  for (const auto& r : records) {
    if (train_set.count(r.patient_id)) out.first.push_back(r);
    else out.second.push_back(r);
  }
  return out;
}

}  // namespace tilediff::corpus
