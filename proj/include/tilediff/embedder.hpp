// SPDX-License-Identifier: Apache-2.0
//
// Frozen deterministic image-feature embedder. Stands in for an external
// foundation-model extractor: the same 64-dim recipe feeds LDM conditioning,
// FID, and the 2D projection plots. The recipe is versioned; any change to
// the constants below requires a version bump and a new fixture.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "tilediff/common.hpp"
#include "tilediff/image.hpp"

namespace tilediff::embedder {

constexpr int kDim = 64;
inline const char* kVersion = "tdfe-v1";

struct EmbeddingVector {
  Eigen::VectorXf values;  // kDim entries
  std::string extractor_version = kVersion;
};

namespace detail {

// Block layout: [0,16) luminance grid, [16,40) color histograms,
// [40,48) gradient orientations, [48,64) random projections.
constexpr int kLumOffset = 0;
constexpr int kHistOffset = 16;
constexpr int kGradOffset = 40;
constexpr int kProjOffset = 48;

// Standardization constants frozen at extractor creation (tdfe-v1). The
// scales double as block weights in cosine-space: the color-histogram block
// is weighted up so appearance changes dominate geometric re-arrangement.
constexpr double kLumMean = 0.55, kLumScale = 0.28;
constexpr double kHistMean = 0.125, kHistScale = 0.035;
constexpr double kGradMean = 0.125, kGradScale = 0.09;
constexpr double kProjScale = 0.35;

constexpr uint64_t kProjectionSeed = 0x7d5a11ce;

inline const Eigen::MatrixXd& projection_matrix() {
  static const Eigen::MatrixXd p = [] {
    Rng rng(kProjectionSeed);
    Eigen::MatrixXd m(16, 32 * 32);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal() / 32.0;
    return m;
  }();
  return p;
}

}  // namespace detail

inline EmbeddingVector embed(const Image& img) {
  if (img.width < 16 || img.height < 16)
    throw DataError("embed requires images of at least 16x16");

  Eigen::VectorXd v = Eigen::VectorXd::Zero(kDim);

  // (i) 4x4 area-averaged luminance grid.
  {
    const auto grid = resize_area_gray(img, 4, 4);
    for (int i = 0; i < 16; ++i)
      v(detail::kLumOffset + i) = (grid[i] - detail::kLumMean) / detail::kLumScale;
  }

  // (ii) 8-bin per-channel color histograms, normalized by pixel count.
  {
    double hist[3][8] = {};
    for (size_t i = 0; i < img.n_pixels(); ++i)
      for (int c = 0; c < 3; ++c) hist[c][img.data[3 * i + c] >> 5] += 1.0;
    const double n = static_cast<double>(img.n_pixels());
    for (int c = 0; c < 3; ++c)
      for (int b = 0; b < 8; ++b)
        v(detail::kHistOffset + 8 * c + b) =
            (hist[c][b] / n - detail::kHistMean) / detail::kHistScale;
  }

  // (iii) 8-bin gradient-orientation histogram, magnitude weighted.
  {
    double bins[8] = {};
    double total = 0.0;
    for (int y = 1; y + 1 < img.height; ++y)
      for (int x = 1; x + 1 < img.width; ++x) {
        const double gx = (luminance(img.at(x + 1, y, 0), img.at(x + 1, y, 1), img.at(x + 1, y, 2)) -
                           luminance(img.at(x - 1, y, 0), img.at(x - 1, y, 1), img.at(x - 1, y, 2))) / 255.0;
        const double gy = (luminance(img.at(x, y + 1, 0), img.at(x, y + 1, 1), img.at(x, y + 1, 2)) -
                           luminance(img.at(x, y - 1, 0), img.at(x, y - 1, 1), img.at(x, y - 1, 2))) / 255.0;
        const double mag = std::hypot(gx, gy);
        if (mag <= 0.0) continue;
        int b = static_cast<int>(std::floor((std::atan2(gy, gx) + M_PI) / (2.0 * M_PI) * 8.0));
        b = std::clamp(b, 0, 7);
        bins[b] += mag;
        total += mag;
      }
    for (int b = 0; b < 8; ++b) {
      const double frac = total > 0.0 ? bins[b] / total : 0.0;
      v(detail::kGradOffset + b) = (frac - detail::kGradMean) / detail::kGradScale;
    }
  }

  // (iv) 16 fixed-seed random projections of the 32x32 grayscale image,
  // centered by the projection of a flat mid-gray image.
  {
    const auto gray = resize_area_gray(img, 32, 32);
    Eigen::VectorXd x(32 * 32);
    for (int i = 0; i < 32 * 32; ++i) x(i) = gray[static_cast<size_t>(i)];
    const Eigen::MatrixXd& p = detail::projection_matrix();
    const Eigen::VectorXd proj = p * x - p.rowwise().sum() * 0.5;
    for (int i = 0; i < 16; ++i)
      v(detail::kProjOffset + i) = proj(i) / detail::kProjScale;
  }

  EmbeddingVector out;
  out.values = v.cast<float>();
  return out;
}

// Row i = embed(images[i]).
inline Eigen::MatrixXf embed_batch(const std::vector<Image>& images) {
  Eigen::MatrixXf m(static_cast<Eigen::Index>(images.size()), kDim);
  for (size_t i = 0; i < images.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) = embed(images[i]).values.transpose();
  return m;
}

inline double cosine_distance(const Eigen::VectorXf& a, const Eigen::VectorXf& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - static_cast<double>(a.dot(b)) / (na * nb);
}

// ---------------------------------------------------------------------------
// Array file I/O: raw little-endian float32 rows + a JSON sidecar written by
// the caller (see pipeline). Row-major N x D.
// ---------------------------------------------------------------------------

inline void write_matrix_f32(const std::filesystem::path& path, const Eigen::MatrixXf& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for write: " + path.string());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::VectorXf row = m.row(i);
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(sizeof(float) * row.size()));
  }
  if (!f) throw DataError("short write: " + path.string());
}

inline Eigen::MatrixXf read_matrix_f32(const std::filesystem::path& path, int cols) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open: " + path.string());
  const auto bytes = static_cast<size_t>(f.tellg());
  if (bytes % (sizeof(float) * cols) != 0)
    throw DataError("file size not a multiple of row size: " + path.string());
  const Eigen::Index rows = static_cast<Eigen::Index>(bytes / (sizeof(float) * cols));
  f.seekg(0);
  Eigen::MatrixXf m(rows, cols);
  std::vector<float> row(static_cast<size_t>(cols));
  for (Eigen::Index i = 0; i < rows; ++i) {
    f.read(reinterpret_cast<char*>(row.data()),
           static_cast<std::streamsize>(sizeof(float) * cols));
    for (int j = 0; j < cols; ++j) m(i, j) = row[static_cast<size_t>(j)];
  }
  if (!f) throw DataError("short read: " + path.string());
  return m;
}

}  // namespace tilediff::embedder
