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

// Post-training controls: direction, speed, brush, local coordinate
// transform and resizing. Controls apply between steps only.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dynca/model.hpp"

namespace dynca {

enum class LocalTransform { kNone, kCircularFromRight, kUserMap };

inline std::string_view transform_name(LocalTransform t) {
  switch (t) {
    case LocalTransform::kNone: return "none";
    case LocalTransform::kCircularFromRight: return "circular_from_right";
    case LocalTransform::kUserMap: return "user_map";
  }
  return "?";
}

/// theta(i, j) = arctan((i - W/2) / (j - H/2)) with i the column and j the
/// row index. 0/0 at the exact center maps to 0.
inline Grid circular_from_right_map(int h, int w) {
  Grid m(h, w, 1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double num = c - w / 2.0;
      const double den = r - h / 2.0;
      // A zero denominator gives +-inf and so +-pi/2.
      const double theta = (num == 0.0 && den == 0.0) ? 0.0 : std::atan(num / den);
      m(r, c, 0) = static_cast<float>(theta);
    }
  return m;
}

struct BrushEvent {
  double row = 0;
  double col = 0;
  double radius = 1;
};

/// Sets every channel of cells within the disk (d^2 <= r^2) to the seed
/// value 0. The step counter is preserved.
template <class T>
void brush_erase(BasicNcaState<T>& state, double row, double col, double radius) {
  require(radius > 0, "brush: radius must be positive");
  BasicGrid<T>& g = state.grid;
  const double r2 = radius * radius;
  const int r0 = std::max(0, static_cast<int>(std::floor(row - radius)));
  const int r1 = std::min(g.height() - 1, static_cast<int>(std::ceil(row + radius)));
  const int c0 = std::max(0, static_cast<int>(std::floor(col - radius)));
  const int c1 = std::min(g.width() - 1, static_cast<int>(std::ceil(col + radius)));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      const double dr = r - row, dc = c - col;
      if (dr * dr + dc * dc <= r2) std::fill_n(g.cell(r, c), g.channels(), T(0));
    }
}

/// Fresh seed at the new size; the old state is discarded.
template <class T = float>
BasicNcaState<T> resize_state(const DyncaConfig& cfg, int new_h, int new_w) {
  return make_seed<T>(cfg, new_h, new_w);
}

/// Live control snapshot owned by one session.
class ControlState {
 public:
  explicit ControlState(int frame_interval = 24) { set_speed(frame_interval); }

  double theta() const { return theta_; }
  void set_direction(double theta) {
    require(std::isfinite(theta), "direction: theta must be finite");
    theta_ = theta;
    rebuild();
  }

  int frame_interval() const { return frame_interval_; }
  void set_speed(int t_live) {
    require(t_live >= 1, "speed: T must be >= 1, got " + std::to_string(t_live));
    frame_interval_ = t_live;
  }

  LocalTransform transform() const { return transform_; }
  const std::optional<Grid>& theta_map() const { return base_map_; }

  /// kUserMap requires a map of shape h x w x 1.
  void set_local_transform(LocalTransform kind, int h, int w, const Grid* user_map = nullptr) {
    switch (kind) {
      case LocalTransform::kNone:
        base_map_.reset();
        break;
      case LocalTransform::kCircularFromRight:
        base_map_ = circular_from_right_map(h, w);
        break;
      case LocalTransform::kUserMap:
        require(user_map != nullptr, "transform: user map missing");
        require_shape(user_map->height() == h && user_map->width() == w && user_map->channels() == 1,
                      "transform: user map shape " + user_map->shape_string() + " does not match state " +
                          std::to_string(h) + "x" + std::to_string(w));
        base_map_ = *user_map;
        break;
    }
    transform_ = kind;
    rebuild();
  }

  /// Recomputes size-dependent maps after a resize. A user map cannot be
  /// resampled and is dropped.
  void on_resize(int h, int w) {
    if (transform_ == LocalTransform::kCircularFromRight) set_local_transform(transform_, h, w);
    else if (transform_ == LocalTransform::kUserMap) set_local_transform(LocalTransform::kNone, h, w);
  }

  /// Steering for the next step. With a map, each cell uses map + theta.
  Steering steering() const {
    if (!effective_map_) return Steering{theta_, nullptr};
    return Steering{0.0, &*effective_map_};
  }

 private:
  void rebuild() {
    if (!base_map_) {
      effective_map_.reset();
      return;
    }
    effective_map_ = *base_map_;
    if (theta_ != 0.0)
      for (auto& v : effective_map_->data()) v = static_cast<float>(v + theta_);
  }

  double theta_ = 0.0;
  int frame_interval_ = 24;
  LocalTransform transform_ = LocalTransform::kNone;
  std::optional<Grid> base_map_;
  std::optional<Grid> effective_map_;
};

}  // namespace dynca
