// SPDX-License-Identifier: Apache-2.0
//
// Optical-density stain separation and augmentation for H&E tiles.
//
// Two separators share the StainModel contract: Macenko (extreme angles in
// the top-2 singular plane of foreground OD pixels) and Vahadane (sparse
// NMF via multiplicative updates). Augmentation perturbs fitted stain
// concentrations (c -> alpha*c + beta) and reconstructs through OD space,
// carrying the unexplained OD residual so that the identity perturbation
// reproduces the input exactly up to 8-bit quantization.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "tilediff/common.hpp"
#include "tilediff/image.hpp"

namespace tilediff::stain {

class InsufficientTissue : public Error {
 public:
  explicit InsufficientTissue(const std::string& msg) : Error(msg) {}
};

class DegenerateStainPlane : public Error {
 public:
  explicit DegenerateStainPlane(const std::string& msg) : Error(msg) {}
};

// Columns are unit-norm OD direction vectors, hematoxylin first (the column
// with the larger blue-channel component). Entries are nonnegative.
struct StainModel {
  Eigen::Matrix<double, 3, 2> stain_matrix;
  Eigen::Vector2d max_concentration;  // 99th-percentile concentration per stain
  bool converged = true;              // false when the NMF hit its iteration cap

  void validate(double tol = 1e-6) const {
    for (int j = 0; j < 2; ++j) {
      if (std::abs(stain_matrix.col(j).norm() - 1.0) > tol)
        throw Error("stain column not unit norm");
      for (int i = 0; i < 3; ++i)
        if (stain_matrix(i, j) < 0.0) throw Error("negative stain matrix entry");
    }
    if (stain_matrix(2, 0) < stain_matrix(2, 1))
      throw Error("hematoxylin column must come first (largest blue OD)");
  }
};

enum class SeparationMethod { macenko, vahadane };

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentParams {
  // One interval per stain (H, E). alpha is multiplicative, beta additive.
  std::array<Interval, 2> alpha{Interval{0.8, 1.2}, Interval{0.8, 1.2}};
  std::array<Interval, 2> beta{Interval{-0.2, 0.2}, Interval{-0.2, 0.2}};
  uint64_t rng_seed = 0;

  static AugmentParams uniform(double alo, double ahi, double blo, double bhi,
                               uint64_t seed) {
    AugmentParams p;
    p.alpha = {Interval{alo, ahi}, Interval{alo, ahi}};
    p.beta = {Interval{blo, bhi}, Interval{blo, bhi}};
    p.rng_seed = seed;
    return p;
  }

  void validate() const {
    for (const auto& a : alpha)
      if (!(a.lo > 0.0 && a.hi < 2.0 && a.lo <= a.hi))
        throw ConfigError("alpha interval must lie inside (0,2)");
    for (const auto& b : beta)
      if (std::abs(b.lo + b.hi) > 1e-12 || b.lo > b.hi)
        throw ConfigError("beta interval must be symmetric about 0");
  }
};

// ---------------------------------------------------------------------------
// OD conversion. od = -log10((p + eps) / io), clamped to be nonnegative.
// ---------------------------------------------------------------------------

constexpr double kDefaultIo = 255.0;
constexpr double kDefaultOdEps = 1e-8;

inline double od_from_intensity(double p, double io = kDefaultIo,
                                double eps = kDefaultOdEps) {
  return std::max(0.0, -std::log10((p + eps) / io));
}

inline double intensity_from_od(double od, double io = kDefaultIo,
                                double eps = kDefaultOdEps) {
  return io * std::pow(10.0, -od) - eps;
}

// N x 3 matrix of per-pixel OD vectors, pixel order row-major.
inline Eigen::MatrixXd rgb_to_od(const Image& img, double io = kDefaultIo,
                                 double eps = kDefaultOdEps) {
  Eigen::MatrixXd od(static_cast<Eigen::Index>(img.n_pixels()), 3);
  for (size_t i = 0; i < img.n_pixels(); ++i)
    for (int c = 0; c < 3; ++c)
      od(static_cast<Eigen::Index>(i), c) =
          od_from_intensity(img.data[3 * i + c], io, eps);
  return od;
}

inline Image od_to_rgb(const Eigen::MatrixXd& od, int width, int height,
                       double io = kDefaultIo, double eps = kDefaultOdEps) {
  Image img(width, height);
  for (Eigen::Index i = 0; i < od.rows(); ++i)
    for (int c = 0; c < 3; ++c)
      img.data[3 * i + c] = clamp_u8(intensity_from_od(od(i, c), io, eps));
  return img;
}

namespace detail {

constexpr double kOdForegroundThreshold = 0.15;
constexpr int kMinTissuePixels = 64;

inline std::vector<Eigen::Index> foreground_indices(const Eigen::MatrixXd& od,
                                                    double threshold) {
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<size_t>(od.rows()));
  for (Eigen::Index i = 0; i < od.rows(); ++i)
    if (od.row(i).norm() > threshold) idx.push_back(i);
  return idx;
}

// Column sign/order normalization shared by both separators: flip columns
// into the nonnegative octant, clamp residual negatives, renormalize, and
// put hematoxylin (larger blue OD) first.
inline Eigen::Matrix<double, 3, 2> canonicalize_columns(
    Eigen::Matrix<double, 3, 2> m) {
  for (int j = 0; j < 2; ++j) {
    if (m.col(j).sum() < 0.0) m.col(j) = -m.col(j);
    m.col(j) = m.col(j).cwiseMax(0.0);
    const double n = m.col(j).norm();
    if (n < 1e-12) throw DegenerateStainPlane("stain direction collapsed to zero");
    m.col(j) /= n;
  }
  if (m(2, 0) < m(2, 1)) m.col(0).swap(m.col(1));
  return m;
}

// Nonnegative least squares for the 2-stain case, solved in closed form:
// try the unconstrained 2x2 solution, then the two single-stain fits.
inline Eigen::Vector2d nnls2(const Eigen::Matrix<double, 3, 2>& s,
                             const Eigen::Vector3d& od,
                             const Eigen::Matrix2d& gram_inv,
                             const Eigen::Vector2d& col_sq_norm_inv) {
  Eigen::Vector2d c = gram_inv * (s.transpose() * od);
  if (c(0) >= 0.0 && c(1) >= 0.0) return c;
  const double c0 = std::max(0.0, s.col(0).dot(od) * col_sq_norm_inv(0));
  const double c1 = std::max(0.0, s.col(1).dot(od) * col_sq_norm_inv(1));
  const double r0 = (od - s.col(0) * c0).squaredNorm();
  const double r1 = (od - s.col(1) * c1).squaredNorm();
  return r0 <= r1 ? Eigen::Vector2d(c0, 0.0) : Eigen::Vector2d(0.0, c1);
}

}  // namespace detail

// Concentrations for every pixel row of `od` (N x 2), nonnegative.
inline Eigen::MatrixXd fit_concentrations(const Eigen::MatrixXd& od,
                                          const StainModel& model) {
  const auto& s = model.stain_matrix;
  Eigen::Matrix2d gram = s.transpose() * s;
  const double det = gram.determinant();
  Eigen::Matrix2d gram_inv;
  if (std::abs(det) < 1e-12) {
    gram_inv.setZero();  // parallel columns; single-stain fallback below
  } else {
    gram_inv = gram.inverse();
  }
  const Eigen::Vector2d csni(1.0 / s.col(0).squaredNorm(), 1.0 / s.col(1).squaredNorm());
  Eigen::MatrixXd c(od.rows(), 2);
  for (Eigen::Index i = 0; i < od.rows(); ++i) {
    if (std::abs(det) < 1e-12) {
      c(i, 0) = std::max(0.0, s.col(0).dot(od.row(i).transpose()) * csni(0));
      c(i, 1) = 0.0;
    } else {
      c.row(i) = detail::nnls2(s, od.row(i).transpose(), gram_inv, csni).transpose();
    }
  }
  return c;
}

struct MacenkoOptions {
  double angle_percentile = 1.0;
  double od_threshold = detail::kOdForegroundThreshold;
  int min_tissue_pixels = detail::kMinTissuePixels;
  double degenerate_tol = 1e-4;  // relative second-eigenvalue cutoff
};

inline StainModel macenko_separate(const Image& img, MacenkoOptions opt = {}) {
  const Eigen::MatrixXd od = rgb_to_od(img);
  const auto fg = detail::foreground_indices(od, opt.od_threshold);
  if (static_cast<int>(fg.size()) < opt.min_tissue_pixels)
    throw InsufficientTissue("foreground pixels: " + std::to_string(fg.size()));

  Eigen::MatrixXd fod(static_cast<Eigen::Index>(fg.size()), 3);
  for (size_t i = 0; i < fg.size(); ++i) fod.row(static_cast<Eigen::Index>(i)) = od.row(fg[i]);

  // Top-2 right singular directions via the 3x3 scatter matrix.
  const Eigen::Matrix3d scatter = fod.transpose() * fod / static_cast<double>(fod.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
  const Eigen::Vector3d evals = eig.eigenvalues();  // ascending
  if (evals(1) < opt.degenerate_tol * evals(2))
    throw DegenerateStainPlane("second singular value below tolerance");
  Eigen::Vector3d v1 = eig.eigenvectors().col(2);
  Eigen::Vector3d v2 = eig.eigenvectors().col(1);
  // Point the principal direction into the data so angles stay in (-pi/2, pi/2).
  if ((fod * v1).sum() < 0.0) v1 = -v1;

  const Eigen::VectorXd a = fod * v1;
  const Eigen::VectorXd b = fod * v2;
  std::vector<double> angles(static_cast<size_t>(fod.rows()));
  for (Eigen::Index i = 0; i < fod.rows(); ++i)
    angles[static_cast<size_t>(i)] = std::atan2(b(i), a(i));
  const double lo = percentile(angles, opt.angle_percentile);
  const double hi = percentile(angles, 100.0 - opt.angle_percentile);

  Eigen::Matrix<double, 3, 2> m;
  m.col(0) = std::cos(lo) * v1 + std::sin(lo) * v2;
  m.col(1) = std::cos(hi) * v1 + std::sin(hi) * v2;

  StainModel model;
  model.stain_matrix = detail::canonicalize_columns(m);
  const Eigen::MatrixXd conc = fit_concentrations(fod, model);
  std::vector<double> c0(conc.rows()), c1(conc.rows());
  for (Eigen::Index i = 0; i < conc.rows(); ++i) {
    c0[static_cast<size_t>(i)] = conc(i, 0);
    c1[static_cast<size_t>(i)] = conc(i, 1);
  }
  model.max_concentration =
      Eigen::Vector2d(percentile(c0, 99.0), percentile(c1, 99.0));
  return model;
}

struct VahadaneOptions {
  double sparsity_lambda = 0.1;
  int n_iter = 200;
  double rel_tol = 1e-4;  // relative change of the stain matrix per iteration
  double od_threshold = detail::kOdForegroundThreshold;
  int min_tissue_pixels = detail::kMinTissuePixels;
};

// Ruifrok-style H&E reference directions; deterministic NMF initialization.
inline Eigen::Matrix<double, 3, 2> reference_he_matrix() {
  Eigen::Matrix<double, 3, 2> m;
  m.col(0) = Eigen::Vector3d(0.65, 0.70, 0.29).normalized();
  m.col(1) = Eigen::Vector3d(0.07, 0.99, 0.11).normalized();
  return m;
}

inline StainModel vahadane_separate(const Image& img, VahadaneOptions opt = {}) {
  const Eigen::MatrixXd od = rgb_to_od(img);
  const auto fg = detail::foreground_indices(od, opt.od_threshold);
  if (static_cast<int>(fg.size()) < opt.min_tissue_pixels)
    throw InsufficientTissue("foreground pixels: " + std::to_string(fg.size()));

  Eigen::MatrixXd v(3, static_cast<Eigen::Index>(fg.size()));  // 3 x N
  for (size_t i = 0; i < fg.size(); ++i)
    v.col(static_cast<Eigen::Index>(i)) = od.row(fg[i]).transpose();

  Eigen::Matrix<double, 3, 2> s = reference_he_matrix();
  Eigen::MatrixXd c = (s.transpose() * s).ldlt().solve(s.transpose() * v).cwiseMax(1e-8);

  const double delta = 1e-12;
  bool converged = false;
  for (int it = 0; it < opt.n_iter; ++it) {
    // Multiplicative updates for 0.5||V - SC||_F^2 + lambda * ||C||_1.
    const Eigen::MatrixXd num_c = s.transpose() * v;
    const Eigen::MatrixXd den_c =
        (s.transpose() * s) * c + Eigen::MatrixXd::Constant(2, c.cols(), opt.sparsity_lambda);
    c = c.cwiseProduct(num_c.cwiseQuotient(den_c.cwiseMax(delta))).cwiseMax(0.0);

    const Eigen::Matrix<double, 3, 2> num_s = v * c.transpose();
    const Eigen::Matrix<double, 3, 2> den_s = s * (c * c.transpose());
    Eigen::Matrix<double, 3, 2> s_new =
        s.cwiseProduct(num_s.cwiseQuotient(den_s.cwiseMax(delta))).cwiseMax(0.0);
    // Keep columns unit norm; fold the scale into the concentrations.
    for (int j = 0; j < 2; ++j) {
      const double n = s_new.col(j).norm();
      if (n < 1e-12) throw DegenerateStainPlane("NMF stain column collapsed");
      s_new.col(j) /= n;
      c.row(j) *= n;
    }
    const double rel = (s_new - s).norm() / std::max(1e-12, s.norm());
    s = s_new;
    if (rel < opt.rel_tol) {
      converged = true;
      break;
    }
  }

  StainModel model;
  // Column ordering may swap; keep concentrations aligned for the percentile.
  Eigen::Matrix<double, 3, 2> canon = detail::canonicalize_columns(s);
  const bool swapped = (canon.col(0) - s.col(0)).norm() > (canon.col(0) - s.col(1)).norm();
  model.stain_matrix = canon;
  model.converged = converged;
  std::vector<double> c0(static_cast<size_t>(c.cols())), c1(c0.size());
  for (Eigen::Index i = 0; i < c.cols(); ++i) {
    c0[static_cast<size_t>(i)] = c(swapped ? 1 : 0, i);
    c1[static_cast<size_t>(i)] = c(swapped ? 0 : 1, i);
  }
  model.max_concentration =
      Eigen::Vector2d(percentile(c0, 99.0), percentile(c1, 99.0));
  return model;
}

inline StainModel separate(const Image& img, SeparationMethod method) {
  return method == SeparationMethod::macenko ? macenko_separate(img)
                                             : vahadane_separate(img);
}

// ---------------------------------------------------------------------------
// Augmenters
// ---------------------------------------------------------------------------

// Stain augmentation: separate, perturb concentrations, reconstruct.
// OD' = S(diag(alpha) C + beta) + (OD - S C); the residual keeps rank-2
// model error out of the perturbation so alpha=1, beta=0 is an identity.
// Blank tiles (InsufficientTissue) pass through unchanged.
inline Image stain_augment(const Image& img, SeparationMethod method,
                           const AugmentParams& params) {
  params.validate();
  StainModel model;
  try {
    model = separate(img, method);
  } catch (const InsufficientTissue&) {
    return img;
  }
  Rng rng(params.rng_seed);
  Eigen::Vector2d alpha, beta;
  for (int j = 0; j < 2; ++j) {
    alpha(j) = rng.uniform(params.alpha[j].lo, params.alpha[j].hi);
    beta(j) = rng.uniform(params.beta[j].lo, params.beta[j].hi);
  }

  const Eigen::MatrixXd od = rgb_to_od(img);
  const Eigen::MatrixXd conc = fit_concentrations(od, model);  // N x 2
  const Eigen::MatrixXd residual = od - conc * model.stain_matrix.transpose();
  Eigen::MatrixXd perturbed = conc;
  perturbed.col(0) = conc.col(0) * alpha(0) + Eigen::VectorXd::Constant(conc.rows(), beta(0));
  perturbed.col(1) = conc.col(1) * alpha(1) + Eigen::VectorXd::Constant(conc.rows(), beta(1));
  perturbed = perturbed.cwiseMax(0.0);
  Eigen::MatrixXd od_new =
      (perturbed * model.stain_matrix.transpose() + residual).cwiseMax(0.0);
  return od_to_rgb(od_new, img.width, img.height);
}

// One of the 8 dihedral transforms, chosen uniformly.
inline Image geometric_augment(const Image& img, uint64_t seed) {
  Rng rng(seed);
  return dihedral_transform(img, static_cast<int>(rng.uniform_int(0, 7)));
}

struct JitterParams {
  double brightness = 0.0;  // factor ~ U[1-b, 1+b]
  double contrast = 0.0;    // factor ~ U[1-c, 1+c]
  double saturation = 0.0;  // factor ~ U[1-s, 1+s]
  double hue_degrees = 0.0; // shift ~ U[-h, h]

  void validate() const {
    if (brightness < 0 || contrast < 0 || saturation < 0 || hue_degrees < 0)
      throw ConfigError("jitter ranges must be nonnegative");
    if (brightness > 1 || contrast > 1 || saturation > 1 || hue_degrees > 180)
      throw ConfigError("jitter ranges out of bounds");
  }
};

struct JitterFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue_degrees = 0.0;
};

inline Image apply_jitter(const Image& img, const JitterFactors& f) {
  Image out = adjust_brightness(img, f.brightness);
  out = adjust_contrast(out, f.contrast);
  out = adjust_saturation(out, f.saturation);
  out = hue_rotate(out, f.hue_degrees);
  return out;
}

// Sequential brightness/contrast/saturation/hue jitter; factors sampled once
// per call. All-zero ranges are the exact identity.
inline Image color_jitter(const Image& img, const JitterParams& params, uint64_t seed) {
  params.validate();
  Rng rng(seed);
  JitterFactors f;
  f.brightness = params.brightness > 0 ? rng.uniform(1.0 - params.brightness, 1.0 + params.brightness) : 1.0;
  f.contrast = params.contrast > 0 ? rng.uniform(1.0 - params.contrast, 1.0 + params.contrast) : 1.0;
  f.saturation = params.saturation > 0 ? rng.uniform(1.0 - params.saturation, 1.0 + params.saturation) : 1.0;
  f.hue_degrees = params.hue_degrees > 0 ? rng.uniform(-params.hue_degrees, params.hue_degrees) : 0.0;
  return apply_jitter(img, f);
}

}  // namespace tilediff::stain
