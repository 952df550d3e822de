// SPDX-License-Identifier: Apache-2.0
//
// 8-bit RGB image container, PNG I/O (libpng), and the pixel-space
// transforms shared by the corpus generator and the augmenters: dihedral
// group, HSV hue rotation, brightness/contrast/saturation, Gaussian blur,
// area-average resize.

#pragma once

#include <png.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "tilediff/common.hpp"

namespace tilediff {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;  // interleaved RGB, row-major

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 3, 0) {}

  size_t idx(int x, int y) const {
    return (static_cast<size_t>(y) * width + x) * 3;
  }
  uint8_t& at(int x, int y, int c) { return data[idx(x, y) + c]; }
  uint8_t at(int x, int y, int c) const { return data[idx(x, y) + c]; }
  size_t n_pixels() const { return static_cast<size_t>(width) * height; }

  bool operator==(const Image& o) const {
    return width == o.width && height == o.height && data == o.data;
  }
};

// Planar float image, one value per pixel per channel. Used for OD maps and
// intermediate rendering; channel count is a template-free runtime field.
struct ImageF {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  ImageF() = default;
  ImageF(int w, int h, int c)
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, 0.f) {}

  float& at(int x, int y, int c) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  float at(int x, int y, int c) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

inline void write_png(const std::filesystem::path& path, const Image& img) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot open for write: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("libpng write failure: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y)
    rows[y] = const_cast<png_bytep>(img.data.data() + img.idx(0, y));
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image read_png(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw DataError("cannot open image: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("libpng read failure: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Image img(static_cast<int>(png_get_image_width(png, info)),
            static_cast<int>(png_get_image_height(png, info)));
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.data.data() + img.idx(0, y);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// ---------------------------------------------------------------------------
// Dihedral group (the 8 flip/rotation symmetries of the square).
// k in [0,8): k%4 = quarter-turns CCW, k>=4 = horizontal flip first.
// ---------------------------------------------------------------------------

inline Image dihedral_transform(const Image& img, int k) {
  if (k < 0 || k >= 8) throw ConfigError("dihedral index must be in [0,8)");
  const bool flip = k >= 4;
  const int rot = k % 4;
  const int w = img.width, h = img.height;
  const int ow = (rot % 2 == 0) ? w : h;
  const int oh = (rot % 2 == 0) ? h : w;
  Image out(ow, oh);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int sx = flip ? (w - 1 - x) : x;
      int tx = 0, ty = 0;
      switch (rot) {
        case 0: tx = sx; ty = y; break;
        case 1: tx = y; ty = w - 1 - sx; break;          // 90 CCW
        case 2: tx = w - 1 - sx; ty = h - 1 - y; break;  // 180
        case 3: tx = h - 1 - y; ty = sx; break;          // 270 CCW
      }
      for (int c = 0; c < 3; ++c) out.at(tx, ty, c) = img.at(x, y, c);
    }
  }
  return out;
}

// Inverse element index in the same encoding. Flip-then-rotate elements are
// involutions (F R_r F R_r = id), so k >= 4 inverts to itself.
inline int dihedral_inverse(int k) {
  if (k < 4) return (4 - k) % 4;
  return k;
}

// ---------------------------------------------------------------------------
// Color space helpers
// ---------------------------------------------------------------------------

inline double luminance(uint8_t r, uint8_t g, uint8_t b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx <= 0.0 ? 0.0 : d / mx;
  if (d <= 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / d + 2.0);
  } else {
    h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0.0) h += 360.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double c = v * s;
  const double hp = std::fmod(h / 60.0 + 6.0, 6.0);
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double rr = 0, gg = 0, bb = 0;
  if (hp < 1)      { rr = c; gg = x; }
  else if (hp < 2) { rr = x; gg = c; }
  else if (hp < 3) { gg = c; bb = x; }
  else if (hp < 4) { gg = x; bb = c; }
  else if (hp < 5) { rr = x; bb = c; }
  else             { rr = c; bb = x; }
  const double m = v - c;
  r = rr + m; g = gg + m; b = bb + m;
}

inline Image hue_rotate(const Image& img, double degrees) {
  if (degrees == 0.0) return img;
  Image out(img.width, img.height);
  for (size_t i = 0; i < img.n_pixels(); ++i) {
    double h, s, v;
    rgb_to_hsv(img.data[3 * i] / 255.0, img.data[3 * i + 1] / 255.0,
               img.data[3 * i + 2] / 255.0, h, s, v);
    h = std::fmod(h + degrees + 360.0, 360.0);
    double r, g, b;
    hsv_to_rgb(h, s, v, r, g, b);
    out.data[3 * i] = clamp_u8(r * 255.0);
    out.data[3 * i + 1] = clamp_u8(g * 255.0);
    out.data[3 * i + 2] = clamp_u8(b * 255.0);
  }
  return out;
}

// out = img * factor, clamped. Factor 1 is the exact identity.
inline Image adjust_brightness(const Image& img, double factor) {
  if (factor == 1.0) return img;
  Image out(img.width, img.height);
  for (size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = clamp_u8(img.data[i] * factor);
  return out;
}

// Blend toward the mean gray level: out = img*f + (1-f)*mean(luma).
inline Image adjust_contrast(const Image& img, double factor) {
  if (factor == 1.0) return img;
  double mean = 0.0;
  for (size_t i = 0; i < img.n_pixels(); ++i)
    mean += luminance(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
  mean /= static_cast<double>(img.n_pixels());
  Image out(img.width, img.height);
  for (size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = clamp_u8(img.data[i] * factor + (1.0 - factor) * mean);
  return out;
}

// Blend toward the per-pixel gray: out = img*f + (1-f)*luma.
inline Image adjust_saturation(const Image& img, double factor) {
  if (factor == 1.0) return img;
  Image out(img.width, img.height);
  for (size_t i = 0; i < img.n_pixels(); ++i) {
    const double y = luminance(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
    for (int c = 0; c < 3; ++c)
      out.data[3 * i + c] = clamp_u8(img.data[3 * i + c] * factor + (1.0 - factor) * y);
  }
  return out;
}

inline Image add_brightness_offset(const Image& img, double offset) {
  if (offset == 0.0) return img;
  Image out(img.width, img.height);
  for (size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = clamp_u8(img.data[i] + offset);
  return out;
}

// Separable Gaussian blur with reflected borders; sigma<=0 is the identity.
inline Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;

  const int w = img.width, h = img.height;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return i;
  };
  std::vector<double> tmp(static_cast<size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * img.at(reflect(x + i, w), y, c);
        tmp[(static_cast<size_t>(y) * w + x) * 3 + c] = acc;
      }
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * tmp[(static_cast<size_t>(reflect(y + i, h)) * w + x) * 3 + c];
        out.at(x, y, c) = clamp_u8(acc);
      }
  return out;
}

// Area-average resize (box filter over fractional source rectangles).
// Deterministic and exact for integer downscale factors.
inline std::vector<double> resize_area_gray(const Image& img, int ow, int oh) {
  std::vector<double> out(static_cast<size_t>(ow) * oh, 0.0);
  const double sx = static_cast<double>(img.width) / ow;
  const double sy = static_cast<double>(img.height) / oh;
  for (int y = 0; y < oh; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < ow; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      double acc = 0.0, area = 0.0;
      for (int yy = static_cast<int>(y0); yy < static_cast<int>(std::ceil(y1)); ++yy) {
        const double hy = std::min<double>(y1, yy + 1) - std::max<double>(y0, yy);
        if (hy <= 0) continue;
        for (int xx = static_cast<int>(x0); xx < static_cast<int>(std::ceil(x1)); ++xx) {
          const double wx = std::min<double>(x1, xx + 1) - std::max<double>(x0, xx);
          if (wx <= 0) continue;
          acc += wx * hy * luminance(img.at(xx, yy, 0), img.at(xx, yy, 1), img.at(xx, yy, 2));
          area += wx * hy;
        }
      }
      out[static_cast<size_t>(y) * ow + x] = acc / (255.0 * area);
    }
  }
  return out;
}

}  // namespace tilediff
