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

// Hand-crafted target motion fields and the flow color wheel.
//
// Cell (row r, col c) of an H x W field sits at lattice point
// i = c - W/2 + 0.5, j = r - H/2 + 0.5. Every field is divided by its mean
// per-cell L2 norm.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "dynca/grid.hpp"
#include "dynca/image.hpp"

namespace dynca {

enum class FieldKind {
  kRight,
  kUp,
  kRightAccRight,
  kRightAccDown,
  kCircular,
  kConverge,
  kDiverge,
  kHyperbolic,
  kTwoBlockX,
  kTwoBlockY,
  kThreeBlock,
  kFourBlock,
};

inline constexpr std::array<FieldKind, 12> kAllFieldKinds{
    FieldKind::kRight,     FieldKind::kUp,         FieldKind::kRightAccRight, FieldKind::kRightAccDown,
    FieldKind::kCircular,  FieldKind::kConverge,   FieldKind::kDiverge,       FieldKind::kHyperbolic,
    FieldKind::kTwoBlockX, FieldKind::kTwoBlockY, FieldKind::kThreeBlock,    FieldKind::kFourBlock};

inline std::string_view field_name(FieldKind k) {
  switch (k) {
    case FieldKind::kRight: return "right";
    case FieldKind::kUp: return "up";
    case FieldKind::kRightAccRight: return "right_acc_right";
    case FieldKind::kRightAccDown: return "right_acc_down";
    case FieldKind::kCircular: return "circular";
    case FieldKind::kConverge: return "converge";
    case FieldKind::kDiverge: return "diverge";
    case FieldKind::kHyperbolic: return "hyperbolic";
    case FieldKind::kTwoBlockX: return "2block_x";
    case FieldKind::kTwoBlockY: return "2block_y";
    case FieldKind::kThreeBlock: return "3block";
    case FieldKind::kFourBlock: return "4block";
  }
  return "?";
}

inline std::optional<FieldKind> parse_field_kind(std::string_view name) {
  for (FieldKind k : kAllFieldKinds)
    if (field_name(k) == name) return k;
  return std::nullopt;
}

/// Comma-separated list of every field name.
inline std::string field_name_list() {
  std::string out;
  for (FieldKind k : kAllFieldKinds) {
    if (!out.empty()) out += ", ";
    out += field_name(k);
  }
  return out;
}

/// Un-normalized vector at lattice point (i, j).
inline std::array<double, 2> raw_field_vector(FieldKind kind, double i, double j, int h, int w) {
  const double diag = std::sqrt(static_cast<double>(h) * h + static_cast<double>(w) * w);
  const double radius = std::sqrt(i * i + j * j);
  constexpr std::array<double, 2> deg0{1.0, 0.0}, deg90{0.0, 1.0}, deg180{-1.0, 0.0}, deg270{0.0, -1.0};
  switch (kind) {
    case FieldKind::kRight: return deg0;
    case FieldKind::kUp: return deg270;
    case FieldKind::kRightAccRight: return {(2.0 * i + w) / 2.0, 0.0};
    case FieldKind::kRightAccDown: return {(2.0 * j + h) / 2.0, 0.0};
    case FieldKind::kCircular: return {j / diag, -i / diag};
    case FieldKind::kConverge: return {-i / radius, -j / radius};
    case FieldKind::kDiverge: return {i / radius, j / radius};
    case FieldKind::kHyperbolic: return {j / diag, i / diag};
    case FieldKind::kTwoBlockX: return j >= 0 ? deg0 : deg180;
    case FieldKind::kTwoBlockY: return j >= 0 ? deg90 : deg270;
    case FieldKind::kThreeBlock:
      if (j >= 0) return deg0;
      return i >= 0 ? deg180 : deg90;
    case FieldKind::kFourBlock:
      if (i >= 0) return j >= 0 ? deg0 : deg270;
      return j >= 0 ? deg90 : deg180;
  }
  return {0.0, 0.0};
}

/// H x W x 2 field before normalization.
inline Grid generate_raw_field(FieldKind kind, int h, int w) {
  require_shape(h >= 2 && w >= 2, "generate_field: size must be at least 2x2");
  Grid f(h, w, 2);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double i = c - w / 2.0 + 0.5;
      const double j = r - h / 2.0 + 0.5;
      const auto v = raw_field_vector(kind, i, j, h, w);
      f(r, c, 0) = static_cast<float>(v[0]);
      f(r, c, 1) = static_cast<float>(v[1]);
    }
  return f;
}

/// Target field, normalized to unit mean L2 norm.
inline Grid generate_field(FieldKind kind, int h, int w) {
  require_shape(h >= 2 && w >= 2, "generate_field: size must be at least 2x2");
  std::vector<std::array<double, 2>> raw(static_cast<std::size_t>(h) * w);
  double norm_sum = 0.0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto v = raw_field_vector(kind, c - w / 2.0 + 0.5, r - h / 2.0 + 0.5, h, w);
      raw[static_cast<std::size_t>(r) * w + c] = v;
      norm_sum += std::hypot(v[0], v[1]);
    }
  const double mean_norm = norm_sum / (static_cast<double>(h) * w);
  Grid f(h, w, 2);
  for (std::size_t k = 0; k < raw.size(); ++k) {
    f[2 * k] = static_cast<float>(raw[k][0] / mean_norm);
    f[2 * k + 1] = static_cast<float>(raw[k][1] / mean_norm);
  }
  return f;
}

/// Mean per-cell L2 norm of a 2-channel field.
template <class T>
double mean_norm(const BasicGrid<T>& f) {
  require_shape(f.channels() == 2, "mean_norm: field must have 2 channels");
  double s = 0.0;
  for (int k = 0; k < f.cells(); ++k) s += std::hypot(static_cast<double>(f[2 * k]), static_cast<double>(f[2 * k + 1]));
  return s / f.cells();
}

/// Raw little-endian f32 export: the u plane, then the v plane.
inline void write_field_raw(std::ostream& os, const Grid& f) {
  require_shape(f.channels() == 2, "write_field_raw: field must have 2 channels");
  auto put = [&](float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    const char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                       static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
    os.write(b, 4);
  };
  for (int ch = 0; ch < 2; ++ch)
    for (int k = 0; k < f.cells(); ++k) put(f[2 * k + ch]);
}

/// Inverse of write_field_raw for an h x w field.
inline Grid read_field_raw(std::istream& is, int h, int w) {
  require(h >= 1 && w >= 1, "read_field_raw: size must be positive");
  Grid f(h, w, 2);
  for (int ch = 0; ch < 2; ++ch)
    for (int k = 0; k < f.cells(); ++k) {
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4)) throw ArgumentError("read_field_raw: file too short");
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      f[2 * k + ch] = std::bit_cast<float>(bits);
    }
  if (is.peek() != std::char_traits<char>::eof()) throw ArgumentError("read_field_raw: trailing bytes");
  return f;
}

// ---------------------------------------------------------------------------
// Color wheel

namespace detail {

// Transition lengths between red, yellow, green, cyan, blue, magenta.
inline constexpr int kRY = 15, kYG = 6, kGC = 4, kCB = 11, kBM = 13, kMR = 6;
inline constexpr int kWheelSize = kRY + kYG + kGC + kCB + kBM + kMR;

inline const std::array<std::array<int, 3>, kWheelSize>& color_wheel() {
  static const auto wheel = [] {
    std::array<std::array<int, 3>, kWheelSize> w{};
    int k = 0;
    for (int i = 0; i < kRY; ++i) w[k++] = {255, 255 * i / kRY, 0};
    for (int i = 0; i < kYG; ++i) w[k++] = {255 - 255 * i / kYG, 255, 0};
    for (int i = 0; i < kGC; ++i) w[k++] = {0, 255, 255 * i / kGC};
    for (int i = 0; i < kCB; ++i) w[k++] = {0, 255 - 255 * i / kCB, 255};
    for (int i = 0; i < kBM; ++i) w[k++] = {255 * i / kBM, 0, 255};
    for (int i = 0; i < kMR; ++i) w[k++] = {255, 0, 255 - 255 * i / kMR};
    return w;
  }();
  return wheel;
}

}  // namespace detail

/// Fractional wheel index in [0, wheel size - 1] for a flow direction.
inline double color_wheel_position(double u, double v) {
  const double a = std::atan2(-v, -u) / std::numbers::pi;
  return (a + 1.0) / 2.0 * (detail::kWheelSize - 1);
}

/// Wheel color for a vector already scaled by the max norm (|(u,v)| <= 1).
inline std::array<std::uint8_t, 3> flow_color(double u, double v) {
  const double rad = std::hypot(u, v);
  const double fk = color_wheel_position(u, v);
  const int k0 = static_cast<int>(fk);
  const int k1 = (k0 + 1) % detail::kWheelSize;
  const double f = fk - k0;
  const auto& wheel = detail::color_wheel();
  std::array<std::uint8_t, 3> out{};
  for (int b = 0; b < 3; ++b) {
    double col = ((1 - f) * wheel[k0][b] + f * wheel[k1][b]) / 255.0;
    if (rad <= 1) col = 1 - rad * (1 - col);
    else col *= 0.75;
    out[b] = static_cast<std::uint8_t>(std::lround(255.0 * col));
  }
  return out;
}

/// Color-coded flow image; magnitude is normalized by the field's max norm.
template <class T>
Rgb8Image colorize_flow(const BasicGrid<T>& f) {
  require_shape(f.channels() == 2, "colorize_flow: field must have 2 channels");
  double max_norm = 0.0;
  for (int k = 0; k < f.cells(); ++k)
    max_norm = std::max(max_norm, std::hypot(static_cast<double>(f[2 * k]), static_cast<double>(f[2 * k + 1])));
  Rgb8Image img(f.width(), f.height());
  for (int r = 0; r < f.height(); ++r)
    for (int c = 0; c < f.width(); ++c) {
      const double u = f(r, c, 0), v = f(r, c, 1);
      const auto rgb = max_norm > 0 ? flow_color(u / max_norm, v / max_norm) : flow_color(0.0, 0.0);
      std::copy(rgb.begin(), rgb.end(), img.at(r, c));
    }
  return img;
}

}  // namespace dynca
