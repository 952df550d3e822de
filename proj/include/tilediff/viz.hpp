// SPDX-License-Identifier: Apache-2.0
//
// Minimal PNG chart renderers for the report: group-colored scatter and
// box-and-whisker plots. No text rendering; the report markdown next to each
// figure carries the axis meaning and the color legend (palette order ==
// group order).

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <vector>

#include "tilediff/common.hpp"
#include "tilediff/image.hpp"

namespace tilediff::viz {

constexpr std::array<std::array<uint8_t, 3>, 8> kPalette{{{31, 119, 180},
                                                          {255, 127, 14},
                                                          {44, 160, 44},
                                                          {214, 39, 40},
                                                          {148, 103, 189},
                                                          {140, 86, 75},
                                                          {227, 119, 194},
                                                          {127, 127, 127}}};

namespace detail {

inline void fill_rect(Image& img, int x0, int y0, int x1, int y1, uint8_t r, uint8_t gg,
                      uint8_t b) {
  x0 = std::max(0, x0);
  y0 = std::max(0, y0);
  x1 = std::min(img.width - 1, x1);
  y1 = std::min(img.height - 1, y1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      img.at(x, y, 0) = r;
      img.at(x, y, 1) = gg;
      img.at(x, y, 2) = b;
    }
}

inline void dot(Image& img, int cx, int cy, int rad, const std::array<uint8_t, 3>& c) {
  fill_rect(img, cx - rad, cy - rad, cx + rad, cy + rad, c[0], c[1], c[2]);
}

}  // namespace detail

// Points are rows of a [N,2] matrix; groups index into the palette.
inline Image render_scatter(const Eigen::MatrixXd& pts, const std::vector<int>& groups,
                            int size = 480) {
  if (pts.rows() != static_cast<Eigen::Index>(groups.size()))
    throw DataError("render_scatter: point/group mismatch");
  Image img(size, size);
  std::fill(img.data.begin(), img.data.end(), uint8_t{255});
  if (pts.rows() == 0) return img;
  const double x_min = pts.col(0).minCoeff(), x_max = pts.col(0).maxCoeff();
  const double y_min = pts.col(1).minCoeff(), y_max = pts.col(1).maxCoeff();
  const double x_span = std::max(1e-12, x_max - x_min);
  const double y_span = std::max(1e-12, y_max - y_min);
  const int margin = size / 12;
  const int span = size - 2 * margin;
  // Frame.
  detail::fill_rect(img, margin, margin, size - margin, margin, 200, 200, 200);
  detail::fill_rect(img, margin, size - margin, size - margin, size - margin, 200, 200, 200);
  detail::fill_rect(img, margin, margin, margin, size - margin, 200, 200, 200);
  detail::fill_rect(img, size - margin, margin, size - margin, size - margin, 200, 200, 200);
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const int px = margin + static_cast<int>((pts(i, 0) - x_min) / x_span * span);
    const int py = size - margin - static_cast<int>((pts(i, 1) - y_min) / y_span * span);
    const auto& c = kPalette[static_cast<size_t>(groups[static_cast<size_t>(i)]) % kPalette.size()];
    detail::dot(img, px, py, 2, c);
  }
  return img;
}

// One box per group: quartile box, median line, 1.5*IQR whiskers, outlier
// dots. Groups render left to right in palette order.
inline Image render_boxplot(const std::vector<std::vector<double>>& groups, int width = 560,
                            int height = 360) {
  Image img(width, height);
  std::fill(img.data.begin(), img.data.end(), uint8_t{255});
  if (groups.empty()) return img;
  double lo = 1e300, hi = -1e300;
  for (const auto& g : groups)
    for (double v : g) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(lo <= hi)) return img;
  const double pad = std::max(1e-12, (hi - lo) * 0.08);
  lo -= pad;
  hi += pad;
  const int margin = height / 10;
  const auto y_of = [&](double v) {
    return height - margin -
           static_cast<int>((v - lo) / (hi - lo) * (height - 2 * margin));
  };
  const int n = static_cast<int>(groups.size());
  const int slot = width / n;
  for (int i = 0; i < n; ++i) {
    const auto& g = groups[static_cast<size_t>(i)];
    if (g.empty()) continue;
    std::vector<double> s = g;
    std::sort(s.begin(), s.end());
    const double q1 = percentile(s, 25.0), q2 = percentile(s, 50.0), q3 = percentile(s, 75.0);
    const double iqr = q3 - q1;
    double w_lo = q1, w_hi = q3;
    for (double v : s) {
      if (v >= q1 - 1.5 * iqr) {
        w_lo = v;
        break;
      }
    }
    for (auto it = s.rbegin(); it != s.rend(); ++it) {
      if (*it <= q3 + 1.5 * iqr) {
        w_hi = *it;
        break;
      }
    }
    const int cx = i * slot + slot / 2;
    const int bw = std::max(8, slot / 4);
    const auto& c = kPalette[static_cast<size_t>(i) % kPalette.size()];
    // Whisker stem and caps.
    detail::fill_rect(img, cx, y_of(w_hi), cx, y_of(w_lo), 120, 120, 120);
    detail::fill_rect(img, cx - bw / 2, y_of(w_hi), cx + bw / 2, y_of(w_hi), 120, 120, 120);
    detail::fill_rect(img, cx - bw / 2, y_of(w_lo), cx + bw / 2, y_of(w_lo), 120, 120, 120);
    // Quartile box and median.
    detail::fill_rect(img, cx - bw, y_of(q3), cx + bw, y_of(q1), c[0], c[1], c[2]);
    detail::fill_rect(img, cx - bw, y_of(q2), cx + bw, y_of(q2), 30, 30, 30);
    for (double v : s)
      if (v < q1 - 1.5 * iqr || v > q3 + 1.5 * iqr) detail::dot(img, cx, y_of(v), 1, {60, 60, 60});
  }
  return img;
}

}  // namespace tilediff::viz
