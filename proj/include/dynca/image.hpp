// Copyright 2026 The DyNCA Engine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dynca/grid.hpp"

namespace dynca {

/// Interleaved 8-bit RGB image, row-major.
struct Rgb8Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Rgb8Image() = default;
  Rgb8Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t* at(int row, int col) { return pixels.data() + (static_cast<std::size_t>(row) * width + col) * 3; }
  const std::uint8_t* at(int row, int col) const {
    return pixels.data() + (static_cast<std::size_t>(row) * width + col) * 3;
  }
  friend bool operator==(const Rgb8Image&, const Rgb8Image&) = default;
};

/// Display mapping of one state value: clamp to [-1, 1], then scale to [0, 255].
template <class T>
std::uint8_t to_display_byte(T v) {
  const double c = std::clamp(static_cast<double>(v), -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 127.5 + 127.5));
}

/// First three channels of a grid rendered to RGB8.
template <class T>
Rgb8Image to_rgb8(const BasicGrid<T>& g) {
  require_shape(g.channels() >= 3, "to_rgb8: grid needs at least 3 channels");
  Rgb8Image img(g.width(), g.height());
  for (int r = 0; r < g.height(); ++r)
    for (int c = 0; c < g.width(); ++c) {
      const T* s = g.cell(r, c);
      std::uint8_t* p = img.at(r, c);
      for (int k = 0; k < 3; ++k) p[k] = to_display_byte(s[k]);
    }
  return img;
}

/// First three channels as an H x W x 3 grid, unclamped.
template <class T>
BasicGrid<T> rgb_channels(const BasicGrid<T>& g) {
  require_shape(g.channels() >= 3, "rgb_channels: grid needs at least 3 channels");
  BasicGrid<T> out(g.height(), g.width(), 3);
  for (int i = 0; i < g.cells(); ++i) std::copy_n(g.cell(i / g.width(), i % g.width()), 3, out.data().data() + 3 * i);
  return out;
}

/// Inverse display mapping: bytes to an H x W x 3 grid in [-1, 1].
template <class T = float>
BasicGrid<T> from_rgb8(const Rgb8Image& img) {
  BasicGrid<T> g(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    g[i] = static_cast<T>(img.pixels[i] / 127.5 - 1.0);
  return g;
}

}  // namespace dynca
