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

// Dense H x W x C grids and the handful of stencil/resampling kernels the
// rest of the engine is built from. Every kernel here has an adjoint so the
// differentiation tape can reuse it.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dynca/common.hpp"

namespace dynca {

enum class PaddingMode : std::uint8_t { kZero = 0, kReplicate = 1, kCircular = 2 };

inline std::string_view padding_name(PaddingMode mode) {
  switch (mode) {
    case PaddingMode::kZero: return "zero";
    case PaddingMode::kReplicate: return "replicate";
    case PaddingMode::kCircular: return "circular";
  }
  return "?";
}

inline PaddingMode parse_padding(std::string_view name) {
  if (name == "zero") return PaddingMode::kZero;
  if (name == "replicate") return PaddingMode::kReplicate;
  if (name == "circular") return PaddingMode::kCircular;
  throw ArgumentError("unknown padding mode: " + std::string(name));
}

/// Maps a possibly out-of-range index onto [0, n), or -1 for a zero tap.
inline int padded_index(int i, int n, PaddingMode mode) {
  if (i >= 0 && i < n) return i;
  switch (mode) {
    case PaddingMode::kZero: return -1;
    case PaddingMode::kReplicate: return i < 0 ? 0 : n - 1;
    case PaddingMode::kCircular: return ((i % n) + n) % n;
  }
  return -1;
}

/// 64-byte aligned allocator. Eigen picks its vectorized peel from the
/// buffer address, so unaligned storage makes float sums depend on where
/// the heap happened to place a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Row-major H x W x C grid. Channels of one cell are contiguous.
template <class T>
class BasicGrid {
 public:
  using value_type = T;

  BasicGrid() = default;
  BasicGrid(int height, int width, int channels, T fill = T(0))
      : height_(height), width_(width), channels_(channels) {
    require_shape(height >= 1 && width >= 1 && channels >= 1,
                  "grid dimensions must be >= 1, got " + shape_string());
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }
  BasicGrid(int height, int width, int channels, const std::vector<T>& data)
      : BasicGrid(height, width, channels, std::span<const T>(data)) {}
  BasicGrid(int height, int width, int channels, std::span<const T> data)
      : height_(height), width_(width), channels_(channels), data_(data.begin(), data.end()) {
    require_shape(height >= 1 && width >= 1 && channels >= 1,
                  "grid dimensions must be >= 1, got " + shape_string());
    require_shape(data_.size() == static_cast<std::size_t>(height) * width * channels,
                  "grid data length does not match " + shape_string());
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  int cells() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int row, int col, int ch) { return data_[index(row, col, ch)]; }
  const T& operator()(int row, int col, int ch) const { return data_[index(row, col, ch)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* cell(int row, int col) { return data_.data() + index(row, col, 0); }
  const T* cell(int row, int col) const { return data_.data() + index(row, col, 0); }
  T* row(int r) { return cell(r, 0); }
  const T* row(int r) const { return cell(r, 0); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  AlignedVector<T>& storage() { return data_; }
  const AlignedVector<T>& storage() const { return data_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const BasicGrid& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  std::string shape_string() const {
    return std::to_string(height_) + "x" + std::to_string(width_) + "x" +
           std::to_string(channels_);
  }

  template <class U>
  BasicGrid<U> cast() const {
    BasicGrid<U> out(height_, width_, channels_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const BasicGrid& a, const BasicGrid& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t index(int row, int col, int ch) const {
    return (static_cast<std::size_t>(row) * width_ + col) * channels_ + ch;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  AlignedVector<T> data_;
};

using Grid = BasicGrid<float>;

/// 3x3 kernel, row-major; entry (dy + 1) * 3 + (dx + 1) weights the
/// neighbour at row offset dy, column offset dx (correlation form).
template <class T>
using BasicKernel3x3 = std::array<T, 9>;
using Kernel3x3 = BasicKernel3x3<float>;

namespace kernels {

template <class T = float>
constexpr BasicKernel3x3<T> identity() {
  return {0, 0, 0, 0, 1, 0, 0, 0, 0};
}

template <class T = float>
constexpr BasicKernel3x3<T> sobel_x() {
  return {T(-1) / 8, 0, T(1) / 8, T(-2) / 8, 0, T(2) / 8, T(-1) / 8, 0, T(1) / 8};
}

template <class T = float>
constexpr BasicKernel3x3<T> sobel_y() {
  return {T(-1) / 8, T(-2) / 8, T(-1) / 8, 0, 0, 0, T(1) / 8, T(2) / 8, T(1) / 8};
}

// 9-point Laplacian.
template <class T = float>
constexpr BasicKernel3x3<T> laplacian() {
  return {T(1) / 16, T(2) / 16,   T(1) / 16, T(2) / 16, T(-12) / 16,
          T(2) / 16, T(1) / 16,   T(2) / 16, T(1) / 16};
}

}  // namespace kernels

/// Writes the responses of every kernel in `bank` to every channel of `g`
/// into `out`, a buffer of H x W cells with `out_channels` values each. The
/// responses land in channels [offset, offset + bank.size() * C) as blocks
/// [k0 c0..cC-1, k1 c0.., ...].
template <class T>
void stencil_bank_into(const BasicGrid<T>& g, std::span<const BasicKernel3x3<T>> bank, PaddingMode pad,
                       T* out, int out_channels, int offset) {
  const int h = g.height(), w = g.width(), c = g.channels();
  const int nk = static_cast<int>(bank.size());
  require_shape(offset >= 0 && offset + nk * c <= out_channels, "stencil_bank_into: channel range out of bounds");
  const std::size_t row_len = static_cast<std::size_t>(w) * c;
  parallel_for(h, [&](int r) {
    thread_local std::vector<T> scratch, zeros;
    scratch.resize(row_len * nk);
    zeros.assign(row_len, T(0));
    const T* rows[3];
    for (int dy = 0; dy < 3; ++dy) {
      const int sr = padded_index(r + dy - 1, h, pad);
      rows[dy] = sr < 0 ? zeros.data() : g.row(sr);
    }
    const std::size_t cs = static_cast<std::size_t>(c);
    const T* __restrict a = rows[0];
    const T* __restrict b = rows[1];
    const T* __restrict d = rows[2];
    if (w >= 3) {
      for (int k = 0; k < nk; ++k) {
        const BasicKernel3x3<T> kw = bank[k];
        T* __restrict acc = scratch.data() + k * row_len;
        for (std::size_t i = cs; i < row_len - cs; ++i)
          acc[i] = kw[0] * a[i - cs] + kw[1] * a[i] + kw[2] * a[i + cs] + kw[3] * b[i - cs] + kw[4] * b[i] +
                   kw[5] * b[i + cs] + kw[6] * d[i - cs] + kw[7] * d[i] + kw[8] * d[i + cs];
      }
    }
    for (int k = 0; k < nk; ++k) {
      const BasicKernel3x3<T>& kw = bank[k];
      T* acc = scratch.data() + k * row_len;
      for (int e = 0; e < std::min(w, 2); ++e) {
        const int x = e == 0 ? 0 : w - 1;
        for (int ch = 0; ch < c; ++ch) {
          T sum = T(0);
          for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx) {
              const int sc = padded_index(x + dx - 1, w, pad);
              if (sc >= 0) sum += kw[dy * 3 + dx] * rows[dy][sc * c + ch];
            }
          acc[x * c + ch] = sum;
        }
      }
    }
    T* dst = out + static_cast<std::size_t>(r) * w * out_channels + offset;
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < nk; ++k)
        std::copy_n(scratch.data() + k * row_len + static_cast<std::size_t>(x) * c, c,
                    dst + static_cast<std::size_t>(x) * out_channels + k * c);
  });
}

/// Applies every kernel in `bank` to every channel of `g`. The output has
/// bank.size() * C channels laid out in blocks: [k0 c0..cC-1, k1 c0.., ...].
template <class T>
BasicGrid<T> stencil_bank(const BasicGrid<T>& g, std::span<const BasicKernel3x3<T>> bank,
                          PaddingMode pad) {
  const int nk = static_cast<int>(bank.size());
  BasicGrid<T> out(g.height(), g.width(), nk * g.channels());
  stencil_bank_into(g, bank, pad, out.data().data(), nk * g.channels(), 0);
  return out;
}

/// Adjoint of stencil_bank: accumulates into grad_in the gradient with
/// respect to the input given grad_out (same layout as the bank output).
template <class T>
void stencil_bank_adjoint(const BasicGrid<T>& grad_out, std::span<const BasicKernel3x3<T>> bank,
                          PaddingMode pad, BasicGrid<T>& grad_in) {
  const int h = grad_in.height(), w = grad_in.width(), c = grad_in.channels();
  const int nk = static_cast<int>(bank.size());
  require_shape(grad_out.height() == h && grad_out.width() == w && grad_out.channels() == nk * c,
                "stencil_bank_adjoint: gradient shape mismatch");
  for (int r = 0; r < h; ++r) {
    const T* go = grad_out.row(r);
    for (int dy = -1; dy <= 1; ++dy) {
      const int sr = padded_index(r + dy, h, pad);
      if (sr < 0) continue;
      T* gi = grad_in.row(sr);
      for (int dx = -1; dx <= 1; ++dx) {
        const int tap = (dy + 1) * 3 + (dx + 1);
        for (int x = 0; x < w; ++x) {
          const int sc = padded_index(x + dx, w, pad);
          if (sc < 0) continue;
          const T* g = go + static_cast<std::size_t>(x) * nk * c;
          T* dst = gi + static_cast<std::size_t>(sc) * c;
          for (int k = 0; k < nk; ++k) {
            const T wt = bank[k][tap];
            for (int ch = 0; ch < c; ++ch) dst[ch] += wt * g[k * c + ch];
          }
        }
      }
    }
  }
}

/// Depthwise 3x3 convolution (correlation form): each channel independently.
template <class T>
BasicGrid<T> conv3x3_depthwise(const BasicGrid<T>& g, const BasicKernel3x3<T>& k,
                               PaddingMode pad) {
  return stencil_bank(g, std::span<const BasicKernel3x3<T>>(&k, 1), pad);
}

/// Full 3x3 convolution mixing channels: weights are [out][in][9], one bias
/// per output channel.
template <class T>
BasicGrid<T> conv3x3_full(const BasicGrid<T>& g, std::span<const T> weights,
                          std::span<const T> bias, int out_channels, PaddingMode pad) {
  const int h = g.height(), w = g.width(), cin = g.channels();
  require_shape(weights.size() == static_cast<std::size_t>(out_channels) * cin * 9,
                "conv3x3_full: weight count mismatch");
  require_shape(bias.size() == static_cast<std::size_t>(out_channels),
                "conv3x3_full: bias count mismatch");
  BasicGrid<T> out(h, w, out_channels);
  parallel_for(h, [&](int r) {
    thread_local std::vector<T> patch;
    patch.resize(static_cast<std::size_t>(cin) * 9);
    for (int x = 0; x < w; ++x) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int tap = (dy + 1) * 3 + (dx + 1);
          const int sr = padded_index(r + dy, h, pad);
          const int sc = padded_index(x + dx, w, pad);
          for (int ci = 0; ci < cin; ++ci)
            patch[ci * 9 + tap] = (sr < 0 || sc < 0) ? T(0) : g(sr, sc, ci);
        }
      }
      T* dst = out.cell(r, x);
      for (int co = 0; co < out_channels; ++co) {
        const T* wr = weights.data() + static_cast<std::size_t>(co) * cin * 9;
        T acc = bias[co];
        for (std::size_t i = 0; i < patch.size(); ++i) acc += wr[i] * patch[i];
        dst[co] = acc;
      }
    }
  });
  return out;
}

/// Adjoint of conv3x3_full with respect to its input.
template <class T>
void conv3x3_full_adjoint(const BasicGrid<T>& grad_out, std::span<const T> weights,
                          PaddingMode pad, BasicGrid<T>& grad_in) {
  const int h = grad_in.height(), w = grad_in.width(), cin = grad_in.channels();
  const int cout = grad_out.channels();
  std::vector<T> patch(static_cast<std::size_t>(cin) * 9);
  for (int r = 0; r < h; ++r) {
    for (int x = 0; x < w; ++x) {
      std::fill(patch.begin(), patch.end(), T(0));
      const T* go = grad_out.cell(r, x);
      for (int co = 0; co < cout; ++co) {
        const T* wr = weights.data() + static_cast<std::size_t>(co) * cin * 9;
        for (std::size_t i = 0; i < patch.size(); ++i) patch[i] += wr[i] * go[co];
      }
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int sr = padded_index(r + dy, h, pad);
          const int sc = padded_index(x + dx, w, pad);
          if (sr < 0 || sc < 0) continue;
          const int tap = (dy + 1) * 3 + (dx + 1);
          T* gi = grad_in.cell(sr, sc);
          for (int ci = 0; ci < cin; ++ci) gi[ci] += patch[ci * 9 + tap];
        }
      }
    }
  }
}

namespace detail {
struct LerpTap {
  int i0;
  int i1;
  double frac;
};

// align_corners = false: output center x maps to (x + 0.5) * in / out - 0.5,
// clamped at 0 on the low side.
inline std::vector<LerpTap> lerp_taps(int in, int out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int x = 0; x < out; ++x) {
    double src = (x + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = i0 < in - 1 ? i0 + 1 : i0;
    taps[x] = {i0, i1, src - i0};
  }
  return taps;
}
}  // namespace detail

/// Bilinear resampling with half-pixel centers (align_corners = false).
/// Interpolates as a + f * (b - a), which reproduces constants exactly.
template <class T>
BasicGrid<T> bilinear_resize(const BasicGrid<T>& g, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: output size must be >= 1");
  if (out_h == g.height() && out_w == g.width()) return g;
  const int c = g.channels();
  const auto xt = detail::lerp_taps(g.width(), out_w);
  const auto yt = detail::lerp_taps(g.height(), out_h);
  BasicGrid<T> out(out_h, out_w, c);
  parallel_for(out_h, [&](int r) {
    thread_local std::vector<T> r0, r1;
    r0.resize(static_cast<std::size_t>(out_w) * c);
    r1.resize(static_cast<std::size_t>(out_w) * c);
    auto horizontal = [&](int sr, std::vector<T>& dst) {
      const T* src = g.row(sr);
      for (int x = 0; x < out_w; ++x) {
        const T f = static_cast<T>(xt[x].frac);
        const T* a = src + static_cast<std::size_t>(xt[x].i0) * c;
        const T* b = src + static_cast<std::size_t>(xt[x].i1) * c;
        for (int ch = 0; ch < c; ++ch) dst[x * c + ch] = a[ch] + f * (b[ch] - a[ch]);
      }
    };
    horizontal(yt[r].i0, r0);
    horizontal(yt[r].i1, r1);
    const T f = static_cast<T>(yt[r].frac);
    T* dst = out.row(r);
    for (std::size_t i = 0; i < r0.size(); ++i) dst[i] = r0[i] + f * (r1[i] - r0[i]);
  });
  return out;
}

/// Adjoint of bilinear_resize: accumulates into grad_in (the source shape).
template <class T>
void bilinear_resize_adjoint(const BasicGrid<T>& grad_out, BasicGrid<T>& grad_in) {
  const int c = grad_in.channels();
  const int out_h = grad_out.height(), out_w = grad_out.width();
  if (out_h == grad_in.height() && out_w == grad_in.width()) {
    for (std::size_t i = 0; i < grad_in.size(); ++i) grad_in[i] += grad_out[i];
    return;
  }
  const auto xt = detail::lerp_taps(grad_in.width(), out_w);
  const auto yt = detail::lerp_taps(grad_in.height(), out_h);
  std::vector<T> row_grad(static_cast<std::size_t>(out_w) * c);
  for (int r = 0; r < out_h; ++r) {
    const T fy = static_cast<T>(yt[r].frac);
    const T* go = grad_out.row(r);
    for (int pass = 0; pass < 2; ++pass) {
      const T wy = pass == 0 ? T(1) - fy : fy;
      if (wy == T(0)) continue;
      T* gi = grad_in.row(pass == 0 ? yt[r].i0 : yt[r].i1);
      for (int x = 0; x < out_w; ++x) {
        const T fx = static_cast<T>(xt[x].frac);
        T* a = gi + static_cast<std::size_t>(xt[x].i0) * c;
        T* b = gi + static_cast<std::size_t>(xt[x].i1) * c;
        for (int ch = 0; ch < c; ++ch) {
          const T g = wy * go[x * c + ch];
          a[ch] += (T(1) - fx) * g;
          b[ch] += fx * g;
        }
      }
    }
  }
}

/// Rotates the (d/dx, d/dy) kernel pair by theta:
/// (cos t * kx + sin t * ky, -sin t * kx + cos t * ky).
template <class T>
std::pair<BasicKernel3x3<T>, BasicKernel3x3<T>> rotate_kernel(const BasicKernel3x3<T>& kx,
                                                              const BasicKernel3x3<T>& ky,
                                                              double theta) {
  const T c = static_cast<T>(std::cos(theta));
  const T s = static_cast<T>(std::sin(theta));
  std::pair<BasicKernel3x3<T>, BasicKernel3x3<T>> out;
  for (int i = 0; i < 9; ++i) {
    out.first[i] = c * kx[i] + s * ky[i];
    out.second[i] = -s * kx[i] + c * ky[i];
  }
  return out;
}

}  // namespace dynca
