// SPDX-License-Identifier: Apache-2.0
//
// Patient-level cross-validation folds. Fold assignment uses iterative
// stratification over patient tile-class histograms so per-fold class
// proportions track the global ones even when patients contribute uneven
// class mixes. Tiles of one patient never straddle a fold boundary.

#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tilediff/common.hpp"
#include "tilediff/corpus.hpp"

namespace tilediff::splits {

using corpus::TileRecord;

using ClassHistogram = std::array<long, corpus::kNumClasses>;

inline std::map<std::string, ClassHistogram> patient_histograms(
    const std::vector<TileRecord>& records) {
  std::map<std::string, ClassHistogram> h;
  for (const auto& r : records) {
    if (!r.label) throw DataError("fold assignment needs labeled tiles: " + r.tile_id);
    auto& hist = h.try_emplace(r.patient_id, ClassHistogram{}).first->second;
    ++hist[static_cast<size_t>(*r.label)];
  }
  return h;
}

// Greedy iterative stratification: repeatedly take the scarcest remaining
// class, hand its heaviest remaining patient to the fold that most wants
// that class. Ties break by seeded draw so the assignment is deterministic
// per seed but not order-biased.
inline std::map<std::string, int> assign_folds(
    const std::map<std::string, ClassHistogram>& hists, int n_folds, uint64_t seed) {
  const auto n_patients = static_cast<int>(hists.size());
  if (n_folds < 2) throw ConfigError("n_folds must be >= 2");
  if (n_folds > n_patients)
    throw ConfigError("n_folds exceeds patient count (" + std::to_string(n_patients) + ")");

  Rng rng(seed);
  constexpr int kC = corpus::kNumClasses;
  std::vector<std::array<double, kC>> desired(static_cast<size_t>(n_folds));
  std::array<long, kC> totals{};
  for (const auto& [id, h] : hists)
    for (int c = 0; c < kC; ++c) totals[static_cast<size_t>(c)] += h[static_cast<size_t>(c)];
  for (auto& d : desired)
    for (int c = 0; c < kC; ++c)
      d[static_cast<size_t>(c)] = static_cast<double>(totals[static_cast<size_t>(c)]) / n_folds;
  // Patient-count budget keeps fold sizes balanced when histograms tie.
  std::vector<double> slots(static_cast<size_t>(n_folds),
                            static_cast<double>(n_patients) / n_folds);

  std::map<std::string, ClassHistogram> remaining = hists;
  std::map<std::string, int> assignment;

  while (!remaining.empty()) {
    std::array<long, kC> rem_totals{};
    for (const auto& [id, h] : remaining)
      for (int c = 0; c < kC; ++c) rem_totals[static_cast<size_t>(c)] += h[static_cast<size_t>(c)];
    int cls = -1;
    long best = 0;
    for (int c = 0; c < kC; ++c) {
      const long t = rem_totals[static_cast<size_t>(c)];
      if (t > 0 && (cls < 0 || t < best)) {
        cls = c;
        best = t;
      }
    }

    std::string pick;
    if (cls < 0) {
      // Leftover patients carry no tiles of any class (empty histograms);
      // place them purely by slot budget.
      pick = remaining.begin()->first;
    } else {
      long heaviest = -1;
      std::vector<std::string> tied;
      for (const auto& [id, h] : remaining) {
        const long w = h[static_cast<size_t>(cls)];
        if (w <= 0) continue;
        if (w > heaviest) {
          heaviest = w;
          tied.clear();
        }
        if (w == heaviest) tied.push_back(id);
      }
      pick = tied.size() == 1
                 ? tied.front()
                 : tied[static_cast<size_t>(rng.uniform_int(0, static_cast<long>(tied.size()) - 1))];
    }

    double best_score = -1e300;
    std::vector<int> tied_folds;
    for (int f = 0; f < n_folds; ++f) {
      const double want =
          cls >= 0 ? desired[static_cast<size_t>(f)][static_cast<size_t>(cls)] : 0.0;
      const double score = want + 1e-3 * slots[static_cast<size_t>(f)];
      if (score > best_score + 1e-12) {
        best_score = score;
        tied_folds.clear();
      }
      if (score > best_score - 1e-12) tied_folds.push_back(f);
    }
    const int fold =
        tied_folds.size() == 1
            ? tied_folds.front()
            : tied_folds[static_cast<size_t>(rng.uniform_int(0, static_cast<long>(tied_folds.size()) - 1))];

    const auto& h = remaining.at(pick);
    for (int c = 0; c < kC; ++c)
      desired[static_cast<size_t>(fold)][static_cast<size_t>(c)] -=
          static_cast<double>(h[static_cast<size_t>(c)]);
    slots[static_cast<size_t>(fold)] -= 1.0;
    assignment[pick] = fold;
    remaining.erase(pick);
  }
  return assignment;
}

struct FoldSplit {
  int fold = 0;
  std::vector<TileRecord> train;  // fit
  std::vector<TileRecord> val;   // early stopping
  std::vector<TileRecord> test;  // held-out fold patients
  std::set<std::string> test_patients;
};

// K patient-level folds; inside each fold's training portion an 80/20
// image-level split supplies the early-stopping set.
inline std::vector<FoldSplit> make_cv_splits(const std::vector<TileRecord>& records,
                                             int n_folds, uint64_t seed,
                                             double train_fraction = 0.8) {
  const auto hists = patient_histograms(records);
  const auto fold_of = assign_folds(hists, n_folds, derive_seed(seed, "fold_assign"));

  std::vector<FoldSplit> folds(static_cast<size_t>(n_folds));
  for (int f = 0; f < n_folds; ++f) folds[static_cast<size_t>(f)].fold = f;
  for (const auto& [patient, fold] : fold_of)
    folds[static_cast<size_t>(fold)].test_patients.insert(patient);

  for (int f = 0; f < n_folds; ++f) {
    auto& fs = folds[static_cast<size_t>(f)];
    std::vector<TileRecord> pool;
    for (const auto& r : records) {
      if (fs.test_patients.count(r.patient_id)) fs.test.push_back(r);
      else pool.push_back(r);
    }
    if (pool.empty() || fs.test.empty())
      throw DataError("degenerate fold " + std::to_string(f));
    std::vector<size_t> idx(pool.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(derive_seed(seed, "fold_val:" + std::to_string(f)));
    rng.shuffle(idx);
    const auto n = static_cast<long>(pool.size());
    long n_train = std::lround(train_fraction * static_cast<double>(n));
    n_train = std::clamp(n_train, 1l, n - 1);
    for (long i = 0; i < n; ++i) {
      if (i < n_train) fs.train.push_back(pool[idx[static_cast<size_t>(i)]]);
      else fs.val.push_back(pool[idx[static_cast<size_t>(i)]]);
    }
  }
  return folds;
}

// Returns the patient ids present in both sets (empty means no leakage).
inline std::vector<std::string> patient_overlap(const std::vector<TileRecord>& a,
                                                const std::vector<TileRecord>& b) {
  std::set<std::string> pa;
  for (const auto& r : a) pa.insert(r.patient_id);
  std::set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& r : b)
    if (pa.count(r.patient_id) && seen.insert(r.patient_id).second) out.push_back(r.patient_id);
  return out;
}

}  // namespace tilediff::splits
