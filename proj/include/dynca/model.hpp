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

// The cell-state machine: perception (single and multi-scale), Cartesian
// positional encoding, the two-layer update rule, and the stochastic
// residual update. This is the inference engine; the differentiable
// variant used for training lives in nca_graph.hpp.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dynca/common.hpp"
#include "dynca/grid.hpp"
#include "dynca/image.hpp"
#include "dynca/rng.hpp"

namespace dynca {

struct DyncaConfig {
  int channels = 12;
  int hidden = 96;
  int seed_h = 128;
  int seed_w = 128;
  PaddingMode padding = PaddingMode::kReplicate;
  std::vector<int> scales{1};
  bool use_cpe = true;
  int frame_interval = 24;  // T: steps per emitted frame
  float update_rate = 0.5f;

  int max_scale() const { return scales.empty() ? 1 : scales.back(); }
  int perception_dim() const { return 4 * channels; }
  int input_dim() const { return perception_dim() + (use_cpe ? 2 : 0); }

  void validate() const {
    require(channels >= 4, "config: channels must be >= 4 (RGB plus one hidden)");
    require(hidden >= 1, "config: hidden width must be >= 1");
    require(!scales.empty() && scales.front() == 1, "config: scales must start at 1");
    require(std::is_sorted(scales.begin(), scales.end()) &&
                std::adjacent_find(scales.begin(), scales.end()) == scales.end(),
            "config: scales must be strictly ascending");
    require(update_rate > 0.0f && update_rate <= 1.0f, "config: update_rate must be in (0, 1]");
    require(frame_interval >= 1, "config: frame interval T must be >= 1");
  }

  // Small model; multi-scale perception only at 256^2 seeds.
  static DyncaConfig small(int seed_size = 128) {
    DyncaConfig cfg;
    cfg.channels = 12;
    cfg.hidden = 96;
    cfg.seed_h = cfg.seed_w = seed_size;
    cfg.scales = seed_size >= 256 ? std::vector<int>{1, 2, 4} : std::vector<int>{1};
    return cfg;
  }

  static DyncaConfig large(int seed_size = 128) {
    DyncaConfig cfg = small(seed_size);
    cfg.channels = 16;
    cfg.hidden = 128;
    return cfg;
  }

  friend bool operator==(const DyncaConfig&, const DyncaConfig&) = default;
};

/// in_dim * FC + FC + FC * C: first layer with bias, bias-free second layer.
inline std::size_t parameter_count(const DyncaConfig& cfg) {
  const std::size_t in = static_cast<std::size_t>(cfg.input_dim());
  const std::size_t fc = static_cast<std::size_t>(cfg.hidden);
  return in * fc + fc + fc * static_cast<std::size_t>(cfg.channels);
}

template <class T>
struct BasicNcaState {
  BasicGrid<T> grid;
  std::uint64_t step_count = 0;
};
using NcaState = BasicNcaState<float>;

/// Per-cell MLP: h = relu(z * w1 + b1), delta = h * w2. Matrices row-major.
template <class T>
struct BasicUpdateRule {
  int input_dim = 0;
  int hidden = 0;
  int channels = 0;
  std::vector<T> w1;  // input_dim x hidden
  std::vector<T> b1;  // hidden
  std::vector<T> w2;  // hidden x channels

  BasicUpdateRule() = default;
  explicit BasicUpdateRule(const DyncaConfig& cfg)
      : input_dim(cfg.input_dim()),
        hidden(cfg.hidden),
        channels(cfg.channels),
        w1(static_cast<std::size_t>(input_dim) * hidden, T(0)),
        b1(static_cast<std::size_t>(hidden), T(0)),
        w2(static_cast<std::size_t>(hidden) * channels, T(0)) {}

  /// Uniform(+-1/sqrt(in)) first layer and bias, zero second layer.
  static BasicUpdateRule initialized(const DyncaConfig& cfg, std::uint64_t seed) {
    BasicUpdateRule rule(cfg);
    std::mt19937_64 gen(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(rule.input_dim));
    auto draw = [&] {
      const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
      return static_cast<T>((2.0 * u - 1.0) * bound);
    };
    for (auto& v : rule.w1) v = draw();
    for (auto& v : rule.b1) v = draw();
    return rule;
  }

  bool matches(const DyncaConfig& cfg) const {
    return input_dim == cfg.input_dim() && hidden == cfg.hidden && channels == cfg.channels &&
           w1.size() == static_cast<std::size_t>(input_dim) * hidden &&
           b1.size() == static_cast<std::size_t>(hidden) &&
           w2.size() == static_cast<std::size_t>(hidden) * channels;
  }

  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size(); }

  template <class U>
  BasicUpdateRule<U> cast() const {
    BasicUpdateRule<U> out;
    out.input_dim = input_dim;
    out.hidden = hidden;
    out.channels = channels;
    out.w1.assign(w1.begin(), w1.end());
    out.b1.assign(b1.begin(), b1.end());
    out.w2.assign(w2.begin(), w2.end());
    return out;
  }

  friend bool operator==(const BasicUpdateRule&, const BasicUpdateRule&) = default;
};
using UpdateRule = BasicUpdateRule<float>;

/// Direction steering: a global angle, optionally overridden per cell.
/// Rotation is applied to the (d/dx, d/dy) perception blocks and to the
/// positional encoding.
struct Steering {
  double theta = 0.0;
  const Grid* theta_map = nullptr;  // H x W x 1, radians

  bool is_identity() const { return theta_map == nullptr && theta == 0.0; }
};

/// P(row, col) = ((2 col + 1) / W - 1, (2 row + 1) / H - 1).
template <class T = float>
BasicGrid<T> positional_encoding(int h, int w) {
  BasicGrid<T> p(h, w, 2);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      p(r, c, 0) = static_cast<T>((2.0 * c + 1.0) / w - 1.0);
      p(r, c, 1) = static_cast<T>((2.0 * r + 1.0) / h - 1.0);
    }
  return p;
}

/// Fixed perception kernels; direction control swaps in rotated pairs.
template <class T>
struct BasicPerceptionKernels {
  BasicKernel3x3<T> dx = kernels::sobel_x<T>();
  BasicKernel3x3<T> dy = kernels::sobel_y<T>();
  BasicKernel3x3<T> lap = kernels::laplacian<T>();
};
using PerceptionKernels = BasicPerceptionKernels<float>;

inline void check_seed_size(const DyncaConfig& cfg, int h, int w) {
  require_shape(h >= 8 && w >= 8, "seed must be at least 8x8, got " + std::to_string(h) + "x" +
                                      std::to_string(w));
  const int s = cfg.max_scale();
  require_shape(h % s == 0 && w % s == 0,
                "seed size " + std::to_string(h) + "x" + std::to_string(w) +
                    " is not divisible by the largest pyramid scale " + std::to_string(s));
}

/// All-zero seed state.
template <class T = float>
BasicNcaState<T> make_seed(const DyncaConfig& cfg, int h, int w) {
  cfg.validate();
  check_seed_size(cfg, h, w);
  return {BasicGrid<T>(h, w, cfg.channels), 0};
}

/// Single-scale perception into `out`, reusing its storage when the shape
/// already fits: [state, d/dx, d/dy, laplacian] channel blocks.
template <class T>
void perceive_into(const BasicGrid<T>& g, PaddingMode pad, const BasicPerceptionKernels<T>& k,
                   BasicGrid<T>& out) {
  const std::array<BasicKernel3x3<T>, 3> bank{k.dx, k.dy, k.lap};
  const int c = g.channels();
  if (out.height() != g.height() || out.width() != g.width() || out.channels() != 4 * c)
    out = BasicGrid<T>(g.height(), g.width(), 4 * c);
  for (int i = 0; i < g.cells(); ++i)
    std::copy_n(g.data().data() + static_cast<std::size_t>(i) * c, c, out.data().data() + static_cast<std::size_t>(i) * 4 * c);
  stencil_bank_into(g, std::span<const BasicKernel3x3<T>>(bank), pad, out.data().data(), 4 * c, c);
}

template <class T>
BasicGrid<T> perceive(const BasicGrid<T>& g, PaddingMode pad,
                      const BasicPerceptionKernels<T>& k = {}) {
  BasicGrid<T> out;
  perceive_into(g, pad, k, out);
  return out;
}

/// Perceives a bilinear pyramid (one level per scale) and sums the
/// upsampled responses in scale order.
template <class T>
void perceive_multiscale_into(const BasicGrid<T>& g, const DyncaConfig& cfg, const BasicPerceptionKernels<T>& k,
                              BasicGrid<T>& sum) {
  const int s_max = cfg.max_scale();
  require_shape(g.height() % s_max == 0 && g.width() % s_max == 0,
                "perceive_multiscale: grid " + g.shape_string() +
                    " not divisible by largest scale " + std::to_string(s_max));
  perceive_into(g, cfg.padding, k, sum);
  for (std::size_t i = 1; i < cfg.scales.size(); ++i) {
    const int s = cfg.scales[i];
    const BasicGrid<T> coarse = bilinear_resize(g, g.height() / s, g.width() / s);
    const BasicGrid<T> up =
        bilinear_resize(perceive(coarse, cfg.padding, k), g.height(), g.width());
    for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += up[j];
  }
}

template <class T>
BasicGrid<T> perceive_multiscale(const BasicGrid<T>& g, const DyncaConfig& cfg,
                                 const BasicPerceptionKernels<T>& k = {}) {
  BasicGrid<T> sum;
  perceive_multiscale_into(g, cfg, k, sum);
  return sum;
}

namespace detail {

template <class T>
struct CellRotation {
  T c = 1;
  T s = 0;
};

template <class T>
CellRotation<T> steering_at(const Steering& steer, int row, int col) {
  // Angles are float-valued on both paths so a constant map reproduces the
  // global angle bit for bit.
  const double theta = static_cast<double>(steer.theta_map ? (*steer.theta_map)(row, col, 0)
                                                           : static_cast<float>(steer.theta));
  return {static_cast<T>(std::cos(theta)), static_cast<T>(std::sin(theta))};
}

// Rotates the d/dx, d/dy blocks of one perception vector in place.
template <class T>
void rotate_cell(T* p, int channels, const CellRotation<T>& rot) {
  T* gx = p + channels;
  T* gy = gx + channels;
  for (int ch = 0; ch < channels; ++ch) {
    const T x = gx[ch], y = gy[ch];
    gx[ch] = rot.c * x + rot.s * y;
    gy[ch] = -rot.s * x + rot.c * y;
  }
}

// Rotates the d/dx, d/dy blocks of a perception grid in place. Because
// perception is linear, this equals perceiving with the rotated kernels.
template <class T>
void rotate_perception(BasicGrid<T>& p, int channels, const Steering& steer) {
  for (int r = 0; r < p.height(); ++r)
    for (int col = 0; col < p.width(); ++col) rotate_cell(p.cell(r, col), channels, steering_at<T>(steer, r, col));
}

// Single-scale perception of one cell with the default kernels:
// [state, d/dx, d/dy, laplacian]. C > 0 fixes the channel count at compile
// time; C == 0 reads it from the grid.
template <int C, class T>
void perceive_cell_fixed(const BasicGrid<T>& g, int r, int col, PaddingMode pad, T* out) {
  static constexpr BasicKernel3x3<T> kx = kernels::sobel_x<T>(), ky = kernels::sobel_y<T>(),
                                     kl = kernels::laplacian<T>();
  const int h = g.height(), w = g.width();
  const int c = C > 0 ? C : g.channels();
  const T* q[9];
  if (r > 0 && r + 1 < h && col > 0 && col + 1 < w) {
    const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(w) * c;
    const T* center = g.cell(r, col);
    for (int dy = 0; dy < 3; ++dy)
      for (int dx = 0; dx < 3; ++dx) q[dy * 3 + dx] = center + (dy - 1) * row + (dx - 1) * c;
  } else {
    thread_local std::vector<T> zeros;
    if (zeros.size() < static_cast<std::size_t>(c)) zeros.assign(static_cast<std::size_t>(c), T(0));
    for (int dy = 0; dy < 3; ++dy) {
      const int rr = padded_index(r + dy - 1, h, pad);
      for (int dx = 0; dx < 3; ++dx) {
        const int cc = padded_index(col + dx - 1, w, pad);
        q[dy * 3 + dx] = rr < 0 || cc < 0 ? zeros.data() : g.cell(rr, cc);
      }
    }
  }
  std::copy_n(q[4], c, out);
  // Fixed-size maps let Eigen pick a packet width that divides C.
  constexpr int kRows = C > 0 ? C : Eigen::Dynamic;
  using Vec = Eigen::Array<T, kRows, 1>;
  Eigen::Map<Vec> gx(out + c, c), gy(out + 2 * c, c), gl(out + 3 * c, c);
  gx.setZero();
  gy.setZero();
  gl.setZero();
  for (int t = 0; t < 9; ++t) {
    const Eigen::Map<const Vec> v(q[t], c);
    if (kx[t] != T(0)) gx += kx[t] * v;
    if (ky[t] != T(0)) gy += ky[t] * v;
    gl += kl[t] * v;
  }
}

template <class T>
void perceive_cell(const BasicGrid<T>& g, int r, int col, PaddingMode pad, T* out) {
  switch (g.channels()) {
    case 12: return perceive_cell_fixed<12>(g, r, col, pad, out);
    case 16: return perceive_cell_fixed<16>(g, r, col, pad, out);
    default: return perceive_cell_fixed<0>(g, r, col, pad, out);
  }
}

}  // namespace detail

/// Positional encoding rotated per cell by the steering angle.
template <class T = float>
BasicGrid<T> steered_positional_encoding(int h, int w, const Steering& steer) {
  BasicGrid<T> p = positional_encoding<T>(h, w);
  if (steer.is_identity()) return p;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const auto rot = detail::steering_at<T>(steer, r, c);
      const T x = p(r, c, 0), y = p(r, c, 1);
      p(r, c, 0) = rot.c * x + rot.s * y;
      p(r, c, 1) = -rot.s * x + rot.c * y;
    }
  return p;
}

/// Advances the state by one step in place (delta t = 1).
template <class T>
void step_inplace(BasicNcaState<T>& state, const BasicUpdateRule<T>& rule, const DyncaConfig& cfg,
                  RngKey key, const Steering& steer = {}) {
  require_shape(rule.matches(cfg), "step: update rule does not match config");
  require_shape(state.grid.channels() == cfg.channels, "step: state channels != config channels");
  BasicGrid<T>& g = state.grid;
  const int h = g.height(), w = g.width(), c = cfg.channels;
  const int pdim = cfg.perception_dim(), in = cfg.input_dim(), fc = cfg.hidden;

  require_shape(steer.is_identity() || steer.theta_map == nullptr ||
                    (steer.theta_map->height() == h && steer.theta_map->width() == w),
                "step: theta map shape does not match the state");

  // Single-scale rules perceive only the cells the mask selects, reading a
  // snapshot of the pre-step state. Pyramids perceive the whole grid first.
  // Scratch is owned by the calling thread; workers reach it through the
  // references, never by naming the thread_locals.
  const bool direct = cfg.scales.size() == 1;
  thread_local BasicGrid<T> perception_buffer, snapshot_buffer;
  BasicGrid<T>& perception = perception_buffer;
  BasicGrid<T>& prev = snapshot_buffer;
  if (direct) {
    prev = g;
  } else {
    perceive_multiscale_into(g, cfg, BasicPerceptionKernels<T>{}, perception);
    if (!steer.is_identity()) detail::rotate_perception(perception, c, steer);
  }
  thread_local BasicGrid<T> plain_cpe;
  BasicGrid<T> steered_cpe;
  const BasicGrid<T>* cpe = nullptr;
  if (cfg.use_cpe) {
    if (steer.is_identity()) {
      if (plain_cpe.height() != h || plain_cpe.width() != w) plain_cpe = positional_encoding<T>(h, w);
      cpe = &plain_cpe;
    } else {
      steered_cpe = steered_positional_encoding<T>(h, w, steer);
      cpe = &steered_cpe;
    }
  }

  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMat>;
  const ConstMap w1(rule.w1.data(), in, fc);
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b1(rule.b1.data(), fc);
  const ConstMap w2(rule.w2.data(), fc, c);

  // Chunks depend only on the grid width, never on the thread count, so
  // results are bit-identical for any number of workers.
  const int rows_per_chunk = std::max(1, 2048 / w);
  const int chunks = (h + rows_per_chunk - 1) / rows_per_chunk;
  const std::uint64_t t = state.step_count;
  parallel_for(chunks, [&](int chunk) {
    const int r0 = chunk * rows_per_chunk;
    const int r1 = std::min(h, r0 + rows_per_chunk);
    thread_local std::vector<int> active;
    thread_local RowMat z, hid, delta;
    active.clear();
    for (int r = r0; r < r1; ++r)
      for (int col = 0; col < w; ++col)
        if (mask_bit(key, t, static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(col),
                     cfg.update_rate))
          active.push_back(r * w + col);
    if (active.empty()) return;
    const int n = static_cast<int>(active.size());
    z.resize(n, in);
    for (int i = 0; i < n; ++i) {
      T* zr = z.data() + static_cast<std::size_t>(i) * in;
      if (direct) {
        const int r = active[i] / w, col = active[i] % w;
        detail::perceive_cell(prev, r, col, cfg.padding, zr);
        if (!steer.is_identity()) detail::rotate_cell(zr, c, detail::steering_at<T>(steer, r, col));
      } else {
        const T* p = perception.data().data() + static_cast<std::size_t>(active[i]) * pdim;
        std::copy(p, p + pdim, zr);
      }
      if (cfg.use_cpe) {
        zr[pdim] = (*cpe)[static_cast<std::size_t>(active[i]) * 2];
        zr[pdim + 1] = (*cpe)[static_cast<std::size_t>(active[i]) * 2 + 1];
      }
    }
    hid.noalias() = z * w1;
    hid.rowwise() += b1;
    hid = hid.cwiseMax(T(0));
    delta.noalias() = hid * w2;
    for (int i = 0; i < n; ++i) {
      T* s = g.data().data() + static_cast<std::size_t>(active[i]) * c;
      const T* d = delta.data() + static_cast<std::size_t>(i) * c;
      for (int ch = 0; ch < c; ++ch) s[ch] += d[ch];
    }
  });
  ++state.step_count;
}

/// Pure form of step_inplace.
template <class T>
BasicNcaState<T> step(BasicNcaState<T> state, const BasicUpdateRule<T>& rule,
                      const DyncaConfig& cfg, RngKey key, const Steering& steer = {}) {
  step_inplace(state, rule, cfg, key, steer);
  return state;
}

template <class T>
struct BasicRollout {
  BasicNcaState<T> state;
  std::vector<Rgb8Image> frames;
};
using Rollout = BasicRollout<float>;

/// Applies n steps and renders a frame after every `frame_interval`-th
/// step (cfg.frame_interval when 0).
template <class T>
BasicRollout<T> rollout(BasicNcaState<T> state, const BasicUpdateRule<T>& rule,
                        const DyncaConfig& cfg, RngKey key, int n, int frame_interval = 0,
                        const Steering& steer = {}) {
  require(n >= 1, "rollout: step count must be >= 1");
  const int stride = frame_interval > 0 ? frame_interval : cfg.frame_interval;
  BasicRollout<T> out;
  for (int k = 1; k <= n; ++k) {
    step_inplace(state, rule, cfg, key, steer);
    if (k % stride == 0) out.frames.push_back(to_rgb8(state.grid));
  }
  out.state = std::move(state);
  return out;
}

}  // namespace dynca
