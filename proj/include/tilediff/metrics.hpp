// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: multi-class F1 variants, Frechet distance between
// embedding distributions, paired two-sided t-test, and a deterministic 2D
// PCA projection for report figures.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tilediff/common.hpp"

namespace tilediff::metrics {

// ---------------------------------------------------------------------------
// F1
// ---------------------------------------------------------------------------

struct F1Report {
  std::vector<double> per_class;  // 0/0 counts as 0
  std::vector<long> support;      // true-label counts
  double macro_f1 = 0.0;          // mean over classes present in y_true
  double weighted_f1 = 0.0;       // support-weighted mean
  double accuracy = 0.0;
};

inline F1Report f1_scores(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                          int n_classes) {
  if (y_true.empty()) throw DataError("f1_scores: empty input");
  if (y_true.size() != y_pred.size()) throw DataError("f1_scores: length mismatch");
  std::vector<long> tp(static_cast<size_t>(n_classes), 0), fp(static_cast<size_t>(n_classes), 0),
      fn(static_cast<size_t>(n_classes), 0);
  long correct = 0;
  for (size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i], p = y_pred[i];
    if (t < 0 || t >= n_classes || p < 0 || p >= n_classes)
      throw DataError("f1_scores: label out of range");
    if (t == p) {
      ++tp[static_cast<size_t>(t)];
      ++correct;
    } else {
      ++fn[static_cast<size_t>(t)];
      ++fp[static_cast<size_t>(p)];
    }
  }
  F1Report r;
  r.per_class.resize(static_cast<size_t>(n_classes));
  r.support.resize(static_cast<size_t>(n_classes));
  double weighted = 0.0, macro = 0.0;
  long total_support = 0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    const auto ci = static_cast<size_t>(c);
    const double denom_p = static_cast<double>(tp[ci] + fp[ci]);
    const double denom_r = static_cast<double>(tp[ci] + fn[ci]);
    const double prec = denom_p > 0 ? static_cast<double>(tp[ci]) / denom_p : 0.0;
    const double rec = denom_r > 0 ? static_cast<double>(tp[ci]) / denom_r : 0.0;
    const double f1 = (prec + rec) > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    r.per_class[ci] = f1;
    r.support[ci] = tp[ci] + fn[ci];
    total_support += r.support[ci];
    weighted += static_cast<double>(r.support[ci]) * f1;
    if (r.support[ci] > 0) {
      macro += f1;
      ++present;
    }
  }
  r.macro_f1 = present > 0 ? macro / present : 0.0;
  r.weighted_f1 = total_support > 0 ? weighted / static_cast<double>(total_support) : 0.0;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(y_true.size());
  return r;
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussians fitted to embedding sets
// ---------------------------------------------------------------------------

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd cov;  // unbiased (n-1) estimate

  static GaussianStats from_samples(const Eigen::MatrixXd& x) {
    if (x.rows() < 2) throw DataError("GaussianStats: need at least 2 samples");
    GaussianStats s;
    s.mu = x.colwise().mean();
    Eigen::MatrixXd xc = x.rowwise() - s.mu.transpose();
    s.cov = (xc.transpose() * xc) / static_cast<double>(x.rows() - 1);
    return s;
  }
};

// d^2 = |mu_a - mu_b|^2 + Tr(Ca + Cb - 2 (Ca Cb)^{1/2}), computed through the
// symmetric form (Ca^{1/2} Cb Ca^{1/2})^{1/2}. Eigenvalues below -1e-8 abort;
// smaller negatives are numerical noise and clamp to zero.
inline double frechet_gaussian(const GaussianStats& a, const GaussianStats& b) {
  if (a.mu.size() != b.mu.size()) throw DataError("frechet_gaussian: dim mismatch");
  constexpr double kNegTol = -1e-8;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.cov);
  if (ea.info() != Eigen::Success) throw DataError("frechet_gaussian: eigensolver failed");
  Eigen::VectorXd la = ea.eigenvalues();
  for (Eigen::Index i = 0; i < la.size(); ++i) {
    if (la[i] < kNegTol * std::max(1.0, std::abs(la[la.size() - 1])))
      throw DataError("frechet_gaussian: covariance not PSD");
    la[i] = std::max(0.0, la[i]);
  }
  Eigen::MatrixXd sqrt_a =
      ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = sqrt_a * b.cov * sqrt_a;
  // Symmetrize against round-off before the second eigensolve.
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m);
  if (em.info() != Eigen::Success) throw DataError("frechet_gaussian: eigensolver failed");
  double trace_sqrt = 0.0;
  const double scale = std::max(1.0, std::abs(em.eigenvalues()[em.eigenvalues().size() - 1]));
  for (Eigen::Index i = 0; i < em.eigenvalues().size(); ++i) {
    const double l = em.eigenvalues()[i];
    if (l < kNegTol * scale) throw DataError("frechet_gaussian: product matrix not PSD");
    trace_sqrt += std::sqrt(std::max(0.0, l));
  }
  const double d2 = (a.mu - b.mu).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt;
  if (d2 < -1e-6) throw DataError("frechet_gaussian: negative distance beyond tolerance");
  return std::max(0.0, d2);
}

// Sample counts below the embedding dimension make the covariance estimates
// rank-deficient; that is allowed but reported through `warn` when provided.
// Non-finite entries are a hard error.
inline double fid_from_samples(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                               std::string* warn = nullptr) {
  if (!a.allFinite() || !b.allFinite())
    throw DataError("fid_from_samples: non-finite embedding entries");
  if (warn && (a.rows() <= a.cols() || b.rows() <= b.cols()))
    *warn = "sample count at or below embedding dimension; covariance is rank-deficient";
  return frechet_gaussian(GaussianStats::from_samples(a), GaussianStats::from_samples(b));
}

inline double fid_from_samples(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  return fid_from_samples(a.cast<double>().eval(), b.cast<double>().eval());
}

// ---------------------------------------------------------------------------
// Paired two-sided t-test
// ---------------------------------------------------------------------------

namespace detail {

// Continued-fraction evaluation of the regularized incomplete beta I_x(a,b)
// (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw DataError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

inline double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw DataError("incomplete beta: a,b must be positive");
  if (x < 0.0 || x > 1.0) throw DataError("incomplete beta: x out of [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0))
    return std::exp(ln_front) * detail::betacf(a, b, x) / a;
  return 1.0 - std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                        b * std::log1p(-x) + a * std::log(x)) *
                   detail::betacf(b, a, 1.0 - x) / b;
}

struct TTestResult {
  double t = 0.0;
  long df = 0;
  double p = 1.0;  // two-sided
};

// For Student's t, the two-sided p-value is I_{df/(df+t^2)}(df/2, 1/2).
inline double student_two_sided_p(double t, long df) {
  if (df < 1) throw DataError("student_two_sided_p: df must be >= 1");
  if (std::isinf(t)) return 0.0;
  const double x = static_cast<double>(df) / (static_cast<double>(df) + t * t);
  return regularized_incomplete_beta(0.5 * static_cast<double>(df), 0.5, x);
}

inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DataError("paired_t_test: length mismatch");
  if (a.size() < 2) throw DataError("paired_t_test: need at least 2 pairs");
  const auto n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double m = mean_of(d);
  const double sd = stddev_of(d);
  TTestResult r;
  r.df = static_cast<long>(a.size()) - 1;
  if (sd == 0.0) {
    // Degenerate: all differences equal. Zero mean is "no evidence"; a
    // nonzero constant difference is infinitely strong evidence.
    if (m == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = m > 0 ? std::numeric_limits<double>::infinity()
                  : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = m / (sd / std::sqrt(n));
  r.p = student_two_sided_p(r.t, r.df);
  return r;
}

// ---------------------------------------------------------------------------
// 2D PCA projection (deterministic sign convention)
// ---------------------------------------------------------------------------

// Rows of x are observations. Projects onto the top-2 principal axes; each
// axis is sign-flipped so its largest-magnitude loading is positive, making
// the output independent of eigensolver sign choices.
inline Eigen::MatrixXd project_2d(const Eigen::MatrixXd& x) {
  if (x.rows() < 3) throw DataError("project_2d: need at least 3 points");
  if (x.cols() < 2) throw DataError("project_2d: need at least 2 dims");
  const Eigen::VectorXd mu = x.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - mu.transpose();
  const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw DataError("project_2d: eigensolver failed");
  Eigen::MatrixXd axes(x.cols(), 2);
  // Eigen orders eigenvalues ascending; take the last two columns.
  axes.col(0) = es.eigenvectors().col(x.cols() - 1);
  axes.col(1) = es.eigenvectors().col(x.cols() - 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::Index imax = 0;
    axes.col(k).cwiseAbs().maxCoeff(&imax);
    if (axes(imax, k) < 0) axes.col(k) = -axes.col(k);
  }
  return xc * axes;
}

inline Eigen::MatrixXd project_2d(const Eigen::MatrixXf& x) {
  return project_2d(Eigen::MatrixXd(x.cast<double>()));
}

}  // namespace tilediff::metrics
