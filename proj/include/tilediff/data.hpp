// SPDX-License-Identifier: Apache-2.0
//
// Image <-> tensor conversion and batching helpers shared by the trainers.

#pragma once

#include <vector>

#include "tilediff/autodiff.hpp"
#include "tilediff/common.hpp"
#include "tilediff/image.hpp"

namespace tilediff::nn {

// Interleaved RGB8 to planar float [3,H,W] in [0,1].
inline Arr image_to_chw(const Image& img) {
  const long hw = static_cast<long>(img.width) * img.height;
  Arr out(3 * hw);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const long p = static_cast<long>(y) * img.width + x;
      for (int c = 0; c < 3; ++c)
        out(static_cast<long>(c) * hw + p) = img.at(x, y, c) / 255.0f;
    }
  return out;
}

inline Image chw_to_image(const Arr& chw, int width, int height) {
  Image img(width, height);
  const long hw = static_cast<long>(width) * height;
  if (chw.size() != 3 * hw) throw DataError("chw_to_image: size mismatch");
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const long p = static_cast<long>(y) * width + x;
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = clamp_u8(255.0 * chw(static_cast<long>(c) * hw + p));
    }
  return img;
}

// Epoch order: a seeded shuffle of [0, n), sliced into batches. The trailing
// short batch is kept.
inline std::vector<std::vector<size_t>> make_batches(size_t n, size_t batch_size, Rng& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  std::vector<std::vector<size_t>> batches;
  for (size_t off = 0; off < n; off += batch_size) {
    const size_t end = std::min(n, off + batch_size);
    batches.emplace_back(idx.begin() + static_cast<long>(off), idx.begin() + static_cast<long>(end));
  }
  return batches;
}

}  // namespace tilediff::nn
