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

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "dynca/motion_fields.hpp"

namespace dynca {
namespace {

TEST(Fields, NamesRoundTrip) {
  for (FieldKind k : kAllFieldKinds) EXPECT_EQ(parse_field_kind(field_name(k)), k);
  EXPECT_FALSE(parse_field_kind("sideways").has_value());
  EXPECT_NE(field_name_list().find("hyperbolic"), std::string::npos);
}

TEST(Fields, UnitMeanNormAtAllSizes) {
  for (int n : {64, 128, 256})
    for (FieldKind k : kAllFieldKinds) EXPECT_NEAR(mean_norm(generate_field(k, n, n)), 1.0, 1e-5) << field_name(k);
  EXPECT_NEAR(mean_norm(generate_field(FieldKind::kCircular, 48, 80)), 1.0, 1e-5);
}

TEST(Fields, RightAndUpAreConstant) {
  const Grid right = generate_field(FieldKind::kRight, 16, 16);
  const Grid up = generate_field(FieldKind::kUp, 16, 16);
  for (int i = 0; i < right.cells(); ++i) {
    EXPECT_EQ(right[2 * i], 1.0f);
    EXPECT_EQ(right[2 * i + 1], 0.0f);
    EXPECT_EQ(up[2 * i], 0.0f);
    EXPECT_EQ(up[2 * i + 1], -1.0f);
  }
}

TEST(Fields, DivergeIsNegatedConverge) {
  for (int n : {64, 128, 256}) {
    const Grid c = generate_field(FieldKind::kConverge, n, n);
    const Grid d = generate_field(FieldKind::kDiverge, n, n);
    const Grid rc = generate_raw_field(FieldKind::kConverge, n, n);
    const Grid rd = generate_raw_field(FieldKind::kDiverge, n, n);
    for (std::size_t k = 0; k < c.size(); ++k) {
      ASSERT_EQ(d[k], -c[k]);
      ASSERT_EQ(rd[k], -rc[k]);
    }
  }
}

TEST(Fields, CircularSignPattern) {
  // (i, j) = (0, j0 > 0) points along +u.
  const auto v = raw_field_vector(FieldKind::kCircular, 0.0, 3.0, 8, 8);
  EXPECT_GT(v[0], 0.0);
  EXPECT_EQ(v[1], 0.0);
  const double diag = std::sqrt(128.0);
  const auto w = raw_field_vector(FieldKind::kCircular, 2.0, -1.0, 8, 8);
  EXPECT_DOUBLE_EQ(w[0], -1.0 / diag);
  EXPECT_DOUBLE_EQ(w[1], -2.0 / diag);
}

TEST(Fields, CircularIsDivergenceFree) {
  const int n = 64;
  const Grid f = generate_field(FieldKind::kCircular, n, n);
  for (int r = 1; r < n - 1; ++r)
    for (int c = 1; c < n - 1; ++c) {
      const double div = (f(r, c + 1, 0) - f(r, c - 1, 0)) / 2.0 + (f(r + 1, c, 1) - f(r - 1, c, 1)) / 2.0;
      ASSERT_NEAR(div, 0.0, 1e-5);
    }
}

TEST(Fields, TwoBlockXIsOddAcrossMidline) {
  const int n = 32;
  const Grid f = generate_field(FieldKind::kTwoBlockX, n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      EXPECT_EQ(f(r, c, 0), -f(n - 1 - r, c, 0));
      EXPECT_EQ(f(r, c, 1), -f(n - 1 - r, c, 1));
    }
}

TEST(Fields, LatticeUsesHalfPixelCenters) {
  // Row 0 of an 8-row grid sits at j = -3.5: 2Block_Y points up there.
  const Grid f = generate_raw_field(FieldKind::kTwoBlockY, 8, 8);
  EXPECT_EQ(f(0, 0, 1), -1.0f);
  EXPECT_EQ(f(7, 0, 1), 1.0f);
  // Right acc. Right grows with the column: (2i + W) / 2 = c + 0.5.
  const Grid g = generate_raw_field(FieldKind::kRightAccRight, 4, 6);
  for (int c = 0; c < 6; ++c) EXPECT_FLOAT_EQ(g(2, c, 0), c + 0.5f);
  const Grid d = generate_raw_field(FieldKind::kRightAccDown, 6, 4);
  for (int r = 0; r < 6; ++r) EXPECT_FLOAT_EQ(d(r, 1, 0), r + 0.5f);
}

TEST(Fields, BlockQuadrants) {
  // 4Block: i >= 0, j >= 0 -> 0 deg; i >= 0, j < 0 -> 270; i < 0, j >= 0 -> 90; else 180.
  const Grid f = generate_raw_field(FieldKind::kFourBlock, 4, 4);
  EXPECT_EQ(f(3, 3, 0), 1.0f);
  EXPECT_EQ(f(0, 3, 1), -1.0f);
  EXPECT_EQ(f(3, 0, 1), 1.0f);
  EXPECT_EQ(f(0, 0, 0), -1.0f);
  const Grid t = generate_raw_field(FieldKind::kThreeBlock, 4, 4);
  EXPECT_EQ(t(3, 0, 0), 1.0f);
  EXPECT_EQ(t(0, 3, 0), -1.0f);
  EXPECT_EQ(t(0, 0, 1), 1.0f);
}

TEST(Fields, HyperbolicFormula) {
  const auto v = raw_field_vector(FieldKind::kHyperbolic, 1.5, -2.5, 6, 8);
  EXPECT_DOUBLE_EQ(v[0], -2.5 / 10.0);
  EXPECT_DOUBLE_EQ(v[1], 1.5 / 10.0);
}

TEST(Fields, RejectsTinySizes) {
  EXPECT_THROW(generate_field(FieldKind::kRight, 1, 4), ShapeError);
}

TEST(Fields, RawExportIsPlanarLittleEndian) {
  Grid f(1, 2, 2, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f});
  std::ostringstream os;
  write_field_raw(os, f);
  const std::string s = os.str();
  ASSERT_EQ(s.size(), 16u);
  float vals[4];
  for (int k = 0; k < 4; ++k) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[k * 4 + b])) << (8 * b);
    std::memcpy(&vals[k], &bits, 4);
  }
  EXPECT_EQ(vals[0], 1.0f);
  EXPECT_EQ(vals[1], 3.0f);
  EXPECT_EQ(vals[2], 2.0f);
  EXPECT_EQ(vals[3], 4.0f);
}

TEST(ColorWheel, ZeroFieldIsWhite) {
  const Rgb8Image img = colorize_flow(Grid(4, 5, 2));
  for (auto b : img.pixels) EXPECT_EQ(b, 255);
}

TEST(ColorWheel, UniformFieldIsUniformHue) {
  const Rgb8Image img = colorize_flow(generate_field(FieldKind::kRight, 8, 8));
  for (int p = 1; p < 64; ++p)
    for (int b = 0; b < 3; ++b) EXPECT_EQ(img.pixels[static_cast<std::size_t>(p) * 3 + b], img.pixels[b]);
  const Rgb8Image up = colorize_flow(generate_field(FieldKind::kUp, 8, 8));
  EXPECT_NE(std::vector<std::uint8_t>(up.pixels.begin(), up.pixels.begin() + 3),
            std::vector<std::uint8_t>(img.pixels.begin(), img.pixels.begin() + 3));
}

TEST(ColorWheel, QuarterTurnShiftsQuarterWheel) {
  const double span = detail::kWheelSize - 1;
  for (double a = 0.05; a < 2 * std::numbers::pi; a += 0.37) {
    const double u = std::cos(a), v = std::sin(a);
    const double p0 = color_wheel_position(u, v);
    const double p1 = color_wheel_position(-v, u);  // rotated by +90 deg
    double d = std::fmod(p1 - p0 + span, span);
    EXPECT_NEAR(d, span / 4, 1e-9);
  }
}

TEST(ColorWheel, WheelEndpoints) {
  EXPECT_EQ(detail::kWheelSize, 55);
  const auto& w = detail::color_wheel();
  EXPECT_EQ(w[0], (std::array<int, 3>{255, 0, 0}));
  EXPECT_EQ(w[15], (std::array<int, 3>{255, 255, 0}));
  // Rightward flow sits at the start of the wheel: pure red at full magnitude.
  EXPECT_EQ(flow_color(1.0, 0.0), (std::array<std::uint8_t, 3>{255, 0, 0}));
  EXPECT_DOUBLE_EQ(color_wheel_position(-1.0, 0.0), 27.0);
}

TEST(ColorWheel, SaturationFollowsMagnitude) {
  const auto full = flow_color(1.0, 0.0);
  const auto half = flow_color(0.5, 0.0);
  EXPECT_EQ(half, (std::array<std::uint8_t, 3>{255, 128, 128}));
  EXPECT_EQ(full[1], 0);
  // Beyond the unit circle colors are darkened instead of saturated.
  EXPECT_EQ(flow_color(2.0, 0.0), (std::array<std::uint8_t, 3>{191, 0, 0}));
}

}  // namespace
}  // namespace dynca
