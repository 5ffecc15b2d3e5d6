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

// Training objectives. Each loss exists twice: a plain value function over
// grids / feature sets, and a tape op whose forward calls the value
// function and whose backward is hand-derived.
//
// Conventions shared by all cosine terms: a zero vector has distance 1 to
// everything and contributes no gradient.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "dynca/autodiff.hpp"
#include "dynca/grid.hpp"
#include "dynca/weights_io.hpp"

namespace dynca {

/// n x width feature rows (one spatial position per row).
template <class T>
struct BasicFeatureSet {
  int rows = 0;
  int width = 0;
  AlignedVector<T> data;

  BasicFeatureSet() = default;
  BasicFeatureSet(int n, int w, const std::vector<T>& values)
      : BasicFeatureSet(n, w, std::span<const T>(values)) {}
  BasicFeatureSet(int n, int w, std::span<const T> values)
      : rows(n), width(w), data(values.begin(), values.end()) {
    require_shape(n >= 1 && w >= 1, "feature set needs n >= 1 rows and width >= 1");
    require_shape(data.size() == static_cast<std::size_t>(n) * w, "feature set data length mismatch");
  }
  /// Flattens a grid along its spatial dimensions.
  static BasicFeatureSet from_grid(const BasicGrid<T>& g) {
    return BasicFeatureSet(g.cells(), g.channels(), g.storage());
  }
  BasicGrid<T> as_grid() const { return BasicGrid<T>(rows, 1, width, data); }
  const T* row(int i) const { return data.data() + static_cast<std::size_t>(i) * width; }
};
using FeatureSet = BasicFeatureSet<float>;

/// H x W x 2 grid of (u, v) motion vectors in pixels per frame.
using FlowField = Grid;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct FeatureView {
  const T* data;
  int rows;
  int width;
  const T* row(int i) const { return data + static_cast<std::size_t>(i) * width; }
};

template <class T>
FeatureView<T> view_of(const BasicGrid<T>& g) {
  return {g.data().data(), g.cells(), g.channels()};
}

template <class T>
FeatureView<T> view_of(const BasicFeatureSet<T>& f) {
  return {f.data.data(), f.rows, f.width};
}

// Unit rows plus the original norms; zero rows stay zero.
template <class T>
RowMat<T> unit_rows(FeatureView<T> a, std::vector<T>& norms) {
  RowMat<T> u(a.rows, a.width);
  norms.assign(static_cast<std::size_t>(a.rows), T(0));
  for (int i = 0; i < a.rows; ++i) {
    const T* r = a.row(i);
    T sq = T(0);
    for (int k = 0; k < a.width; ++k) sq += r[k] * r[k];
    const T n = std::sqrt(sq);
    norms[i] = n;
    for (int k = 0; k < a.width; ++k) u(i, k) = n > T(0) ? r[k] / n : T(0);
  }
  return u;
}

// Lexicographic order on (rows, width, data), used to evaluate the
// structure term on a canonical argument order so it is exactly symmetric.
template <class T>
bool canonical_less(FeatureView<T> a, FeatureView<T> b) {
  if (a.rows != b.rows) return a.rows < b.rows;
  if (a.width != b.width) return a.width < b.width;
  const std::size_t n = static_cast<std::size_t>(a.rows) * a.width;
  for (std::size_t i = 0; i < n; ++i)
    if (a.data[i] != b.data[i]) return a.data[i] < b.data[i];
  return false;
}

template <class T>
struct StructureResult {
  T value = 0;
  bool forward_wins = true;  // D(X,Y) >= D(Y,X)
  std::vector<int> x_to_y;   // argmin over Y for each row of X
  std::vector<int> y_to_x;   // argmin over X for each row of Y
  T d_xy = 0;
  T d_yx = 0;
};

template <class T>
StructureResult<T> structure(FeatureView<T> x, FeatureView<T> y) {
  require_shape(x.width == y.width, "ot_structure: feature width mismatch");
  require_shape(x.rows >= 1 && y.rows >= 1, "ot_structure: empty feature set");
  const bool swap = canonical_less(y, x);
  const FeatureView<T> a = swap ? y : x;
  const FeatureView<T> b = swap ? x : y;
  std::vector<T> na, nb;
  const RowMat<T> ua = unit_rows(a, na);
  const RowMat<T> ub = unit_rows(b, nb);
  RowMat<T> dist(a.rows, b.rows);
  dist.noalias() = ua * ub.transpose();
  dist = (T(1) - dist.array()).matrix();
  std::vector<int> a_to_b(static_cast<std::size_t>(a.rows)), b_to_a(static_cast<std::size_t>(b.rows));
  T sum_a = 0;
  for (int i = 0; i < a.rows; ++i) {
    int best = 0;
    for (int j = 1; j < b.rows; ++j)
      if (dist(i, j) < dist(i, best)) best = j;
    a_to_b[i] = best;
    sum_a += dist(i, best);
  }
  T sum_b = 0;
  for (int j = 0; j < b.rows; ++j) {
    int best = 0;
    for (int i = 1; i < a.rows; ++i)
      if (dist(i, j) < dist(best, j)) best = i;
    b_to_a[j] = best;
    sum_b += dist(best, j);
  }
  const T d_ab = sum_a / static_cast<T>(a.rows);
  const T d_ba = sum_b / static_cast<T>(b.rows);
  StructureResult<T> out;
  out.d_xy = swap ? d_ba : d_ab;
  out.d_yx = swap ? d_ab : d_ba;
  out.x_to_y = swap ? std::move(b_to_a) : std::move(a_to_b);
  out.y_to_x = swap ? std::move(a_to_b) : std::move(b_to_a);
  out.forward_wins = out.d_xy >= out.d_yx;
  out.value = std::max(out.d_xy, out.d_yx);
  return out;
}

// d/dp of (1 - cos(p, q)) added (times `weight`) into grad.
template <class T>
void add_cosine_distance_grad(const T* p, const T* q, int width, T weight, T* grad) {
  T pp = 0, qq = 0, pq = 0;
  for (int k = 0; k < width; ++k) {
    pp += p[k] * p[k];
    qq += q[k] * q[k];
    pq += p[k] * q[k];
  }
  if (pp == T(0) || qq == T(0)) return;
  const T np = std::sqrt(pp), nq = std::sqrt(qq);
  const T cosv = pq / (np * nq);
  for (int k = 0; k < width; ++k) {
    const T dcos = q[k] / (np * nq) - cosv * p[k] / pp;
    grad[k] -= weight * dcos;
  }
}

template <class T>
T sign_of(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

template <class T>
struct Moments {
  std::vector<T> mean;
  RowMat<T> cov;
};

template <class T>
Moments<T> moments(FeatureView<T> x) {
  Moments<T> m;
  const int n = x.rows, w = x.width;
  std::vector<double> acc(static_cast<std::size_t>(w), 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < w; ++k) acc[k] += static_cast<double>(x.row(i)[k]);
  m.mean.resize(static_cast<std::size_t>(w));
  for (int k = 0; k < w; ++k) m.mean[k] = static_cast<T>(acc[k] / n);
  RowMat<double> centered(n, w);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < w; ++k) centered(i, k) = static_cast<double>(x.row(i)[k]) - static_cast<double>(m.mean[k]);
  const RowMat<double> cov = (centered.transpose() * centered) / static_cast<double>(n);
  m.cov = cov.template cast<T>();
  return m;
}

template <class T>
T moment_distance(const Moments<T>& a, const Moments<T>& b) {
  const std::size_t w = a.mean.size();
  double mean_term = 0, cov_term = 0;
  for (std::size_t k = 0; k < w; ++k) mean_term += std::abs(static_cast<double>(a.mean[k]) - b.mean[k]);
  for (Eigen::Index i = 0; i < a.cov.size(); ++i)
    cov_term += std::abs(static_cast<double>(a.cov.data()[i]) - b.cov.data()[i]);
  const double c = static_cast<double>(w);
  return static_cast<T>(mean_term / c + cov_term / (c * c));
}

// Gradient of the moment distance with respect to the rows of `x`, where
// `self` are x's moments and `other` the opposite set's.
template <class T>
void add_moment_grad(FeatureView<T> x, const Moments<T>& self, const Moments<T>& other, T scale,
                     T* grad) {
  const int n = x.rows, w = x.width;
  const double c = static_cast<double>(w);
  std::vector<double> g_mean(static_cast<std::size_t>(w));
  for (int k = 0; k < w; ++k) g_mean[k] = sign_of<double>(static_cast<double>(self.mean[k]) - other.mean[k]) / c;
  RowMat<double> g_cov(w, w);
  for (int i = 0; i < w; ++i)
    for (int j = 0; j < w; ++j)
      g_cov(i, j) = sign_of<double>(static_cast<double>(self.cov(i, j)) - other.cov(i, j)) / (c * c);
  const RowMat<double> sym = g_cov + g_cov.transpose();
  RowMat<double> centered(n, w);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < w; ++k) centered(i, k) = static_cast<double>(x.row(i)[k]) - static_cast<double>(self.mean[k]);
  const RowMat<double> g_rows = centered * sym.transpose() / static_cast<double>(n);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < w; ++k)
      grad[static_cast<std::size_t>(i) * w + k] +=
          static_cast<T>(static_cast<double>(scale) * (g_rows(i, k) + g_mean[k] / n));
}

}  // namespace detail

template <class T>
T overflow_loss(const BasicGrid<T>& s) {
  double total = 0;
  for (T v : s.data()) total += std::abs(static_cast<double>(v) - std::clamp(static_cast<double>(v), -1.0, 1.0));
  return static_cast<T>(total / s.size());
}

// ---------------------------------------------------------------------------
// OT style terms

/// max(D(X,Y), D(Y,X)) with D(A,B) the mean over A of the min over B of the
/// cosine distance.
template <class T>
T ot_structure(const BasicFeatureSet<T>& x, const BasicFeatureSet<T>& y) {
  return dynca::detail::structure(dynca::detail::view_of(x), dynca::detail::view_of(y)).value;
}

/// (1/C)|mu_X - mu_Y|_1 + (1/C^2)|Sigma_X - Sigma_Y|_1, biased covariance.
template <class T>
T ot_moment(const BasicFeatureSet<T>& x, const BasicFeatureSet<T>& y) {
  require_shape(x.width == y.width, "ot_moment: feature width mismatch");
  return dynca::detail::moment_distance(dynca::detail::moments(dynca::detail::view_of(x)), dynca::detail::moments(dynca::detail::view_of(y)));
}

namespace ad {

template <class T>
Var ot_structure(Tape<T>& t, Var x, Var y) {
  auto res = std::make_shared<dynca::detail::StructureResult<T>>(
      dynca::detail::structure(dynca::detail::view_of(t.value(x)), dynca::detail::view_of(t.value(y))));
  return t.record(BasicGrid<T>(1, 1, 1, res->value), {x, y}, [x, y, res](Tape<T>& tp, int self) {
    const T g = tp.grad(self)[0];
    const auto vx = dynca::detail::view_of(tp.value(x));
    const auto vy = dynca::detail::view_of(tp.value(y));
    const int w = vx.width;
    auto push = [&](Var target, dynca::detail::FeatureView<T> tv, dynca::detail::FeatureView<T> ov,
                    const std::vector<int>& t_to_o, const std::vector<int>& o_to_t, bool target_is_first) {
      if (!tp.requires_grad(target)) return;
      T* grad = tp.grad(target).data().data();
      const bool first_wins = res->forward_wins;
      if (target_is_first == first_wins) {
        // Winning direction is mean over target rows of min over other.
        const T wgt = g / static_cast<T>(tv.rows);
        for (int i = 0; i < tv.rows; ++i)
          dynca::detail::add_cosine_distance_grad(tv.row(i), ov.row(t_to_o[i]), w, wgt,
                                           grad + static_cast<std::size_t>(i) * w);
      } else {
        // Winning direction is mean over other rows of min over target.
        const T wgt = g / static_cast<T>(ov.rows);
        for (int j = 0; j < ov.rows; ++j)
          dynca::detail::add_cosine_distance_grad(tv.row(o_to_t[j]), ov.row(j), w, wgt,
                                           grad + static_cast<std::size_t>(o_to_t[j]) * w);
      }
    };
    push(x, vx, vy, res->x_to_y, res->y_to_x, true);
    push(y, vy, vx, res->y_to_x, res->x_to_y, false);
  });
}

template <class T>
Var ot_moment(Tape<T>& t, Var x, Var y) {
  const auto vx = dynca::detail::view_of(t.value(x));
  const auto vy = dynca::detail::view_of(t.value(y));
  require_shape(vx.width == vy.width, "ot_moment: feature width mismatch");
  auto mx = std::make_shared<dynca::detail::Moments<T>>(dynca::detail::moments(vx));
  auto my = std::make_shared<dynca::detail::Moments<T>>(dynca::detail::moments(vy));
  const T value = dynca::detail::moment_distance(*mx, *my);
  return t.record(BasicGrid<T>(1, 1, 1, value), {x, y}, [x, y, mx, my](Tape<T>& tp, int self) {
    const T g = tp.grad(self)[0];
    if (tp.requires_grad(x))
      dynca::detail::add_moment_grad(dynca::detail::view_of(tp.value(x)), *mx, *my, g, tp.grad(x).data().data());
    if (tp.requires_grad(y))
      dynca::detail::add_moment_grad(dynca::detail::view_of(tp.value(y)), *my, *mx, g, tp.grad(y).data().data());
  });
}

/// Mean of |S - clip(S, -1, 1)| over all entries.
template <class T>
Var overflow_loss(Tape<T>& t, Var s) {
  const auto& vs = t.value(s);
  const T n = static_cast<T>(vs.size());
  return t.record(BasicGrid<T>(1, 1, 1, dynca::overflow_loss(vs)), {s}, [s, n](Tape<T>& tp, int self) {
    if (!tp.requires_grad(s)) return;
    const T g = tp.grad(self)[0] / n;
    const auto& v = tp.value(s);
    auto& gs = tp.grad(s);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] > T(1)) gs[i] += g;
      else if (v[i] < T(-1)) gs[i] -= g;
    }
  });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Vector-field motion terms

namespace detail {
inline void check_flow_pair(int h1, int w1, int c1, int h2, int w2, int c2) {
  require_shape(h1 == h2 && w1 == w2, "flow fields must have equal shapes");
  require_shape(c1 == 2 && c2 == 2, "flow fields must have 2 channels");
}
}  // namespace detail

/// Mean over cells of 1 - cos(Ug, Ut).
template <class T>
T dir_loss(const BasicGrid<T>& ug, const BasicGrid<T>& ut) {
  dynca::detail::check_flow_pair(ug.height(), ug.width(), ug.channels(), ut.height(), ut.width(), ut.channels());
  double total = 0;
  for (int i = 0; i < ug.cells(); ++i) {
    const T* g = ug.data().data() + 2 * i;
    const T* t = ut.data().data() + 2 * i;
    const T ng = std::sqrt(g[0] * g[0] + g[1] * g[1]);
    const T nt = std::sqrt(t[0] * t[0] + t[1] * t[1]);
    const T cosv = (ng > T(0) && nt > T(0)) ? (g[0] * t[0] + g[1] * t[1]) / (ng * nt) : T(0);
    total += static_cast<double>(T(1) - cosv);
  }
  return static_cast<T>(total / ug.cells());
}

inline void check_step_pair(long long t1, long long t2) {
  require(t2 > t1, "norm_loss: t2 must be greater than t1");
}

/// Mean over cells of |(T / (t2 - t1)) |Ug| - |Ut||.
template <class T>
T norm_loss(const BasicGrid<T>& ug, const BasicGrid<T>& ut, long long t1, long long t2, int frame_interval) {
  check_step_pair(t1, t2);
  dynca::detail::check_flow_pair(ug.height(), ug.width(), ug.channels(), ut.height(), ut.width(), ut.channels());
  const T k = static_cast<T>(frame_interval) / static_cast<T>(t2 - t1);
  double total = 0;
  for (int i = 0; i < ug.cells(); ++i) {
    const T* g = ug.data().data() + 2 * i;
    const T* t = ut.data().data() + 2 * i;
    total += std::abs(static_cast<double>(k * std::sqrt(g[0] * g[0] + g[1] * g[1]) -
                                          std::sqrt(t[0] * t[0] + t[1] * t[1])));
  }
  return static_cast<T>(total / ug.cells());
}

/// (1 - min(1, L_dir)) * L_norm + gamma * L_dir.
template <class T>
T mvec_combine(T l_dir, T l_norm, T gamma) {
  return (T(1) - std::min(T(1), l_dir)) * l_norm + gamma * l_dir;
}

template <class T>
T mvec_loss(const BasicGrid<T>& ug, const BasicGrid<T>& ut, long long t1, long long t2, int frame_interval,
            T gamma) {
  return mvec_combine(dir_loss(ug, ut), norm_loss(ug, ut, t1, t2, frame_interval), gamma);
}

namespace ad {

template <class T>
Var dir_loss(Tape<T>& t, Var ug, Var ut) {
  const T value = dynca::dir_loss(t.value(ug), t.value(ut));
  return t.record(BasicGrid<T>(1, 1, 1, value), {ug, ut}, [ug, ut](Tape<T>& tp, int self) {
    const auto& vg = tp.value(ug);
    const auto& vt = tp.value(ut);
    const T g = tp.grad(self)[0] / static_cast<T>(vg.cells());
    for (int i = 0; i < vg.cells(); ++i) {
      const T* a = vg.data().data() + 2 * i;
      const T* b = vt.data().data() + 2 * i;
      if (tp.requires_grad(ug)) dynca::detail::add_cosine_distance_grad(a, b, 2, g, tp.grad(ug).data().data() + 2 * i);
      if (tp.requires_grad(ut)) dynca::detail::add_cosine_distance_grad(b, a, 2, g, tp.grad(ut).data().data() + 2 * i);
    }
  });
}

template <class T>
Var norm_loss(Tape<T>& t, Var ug, Var ut, long long t1, long long t2, int frame_interval) {
  const T value = dynca::norm_loss(t.value(ug), t.value(ut), t1, t2, frame_interval);
  const T k = static_cast<T>(frame_interval) / static_cast<T>(t2 - t1);
  return t.record(BasicGrid<T>(1, 1, 1, value), {ug, ut}, [ug, ut, k](Tape<T>& tp, int self) {
    const auto& vg = tp.value(ug);
    const auto& vt = tp.value(ut);
    const T g = tp.grad(self)[0] / static_cast<T>(vg.cells());
    for (int i = 0; i < vg.cells(); ++i) {
      const T* a = vg.data().data() + 2 * i;
      const T* b = vt.data().data() + 2 * i;
      const T na = std::sqrt(a[0] * a[0] + a[1] * a[1]);
      const T nb = std::sqrt(b[0] * b[0] + b[1] * b[1]);
      const T s = dynca::detail::sign_of(k * na - nb) * g;
      if (tp.requires_grad(ug) && na > T(0)) {
        T* ga = tp.grad(ug).data().data() + 2 * i;
        ga[0] += s * k * a[0] / na;
        ga[1] += s * k * a[1] / na;
      }
      if (tp.requires_grad(ut) && nb > T(0)) {
        T* gb = tp.grad(ut).data().data() + 2 * i;
        gb[0] -= s * b[0] / nb;
        gb[1] -= s * b[1] / nb;
      }
    }
  });
}

template <class T>
Var mvec_combine(Tape<T>& t, Var l_dir, Var l_norm, T gamma) {
  const Var gate = add_scalar(t, scale(t, min_scalar(t, l_dir, T(1)), T(-1)), T(1));
  return add(t, mul(t, gate, l_norm), scale(t, l_dir, gamma));
}

template <class T>
Var mvec_loss(Tape<T>& t, Var ug, Var ut, long long t1, long long t2, int frame_interval, T gamma) {
  return mvec_combine(t, dir_loss(t, ug, ut), norm_loss(t, ug, ut, t1, t2, frame_interval), gamma);
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Feature extraction backends

/// Multi-level deep-feature backend for the appearance loss. Level l of
/// extract() is an h_l x w_l x width_l grid; each cell is one feature row.
template <class T>
class BasicFeatureExtractor {
 public:
  virtual ~BasicFeatureExtractor() = default;
  virtual int levels() const = 0;
  virtual std::vector<ad::Var> extract(ad::Tape<T>& tape, ad::Var image) const = 0;

  std::vector<BasicFeatureSet<T>> extract(const BasicGrid<T>& image) const {
    ad::Tape<T> tape;
    const auto vars = extract(tape, tape.constant(image));
    std::vector<BasicFeatureSet<T>> out;
    for (ad::Var v : vars) out.push_back(BasicFeatureSet<T>::from_grid(tape.value(v)));
    return out;
  }
};
using FeatureExtractor = BasicFeatureExtractor<float>;

/// Fixed 3x3 filter banks with ReLU, level l applied to the image
/// bilinearly downsampled by 2^l.
template <class T>
class FilterBankExtractor final : public BasicFeatureExtractor<T> {
 public:
  explicit FilterBankExtractor(const FeatureBank& bank, PaddingMode pad = PaddingMode::kZero)
      : bank_(bank), pad_(pad) {
    require(!bank.levels.empty(), "feature bank has no levels");
    for (const auto& level : bank.levels) {
      require_shape(level.in_channels == 3, "feature bank levels must take 3 input channels");
      weights_.push_back(std::make_shared<const std::vector<T>>(level.weights.begin(), level.weights.end()));
      bias_.push_back(std::make_shared<const std::vector<T>>(level.bias.begin(), level.bias.end()));
    }
  }

  using BasicFeatureExtractor<T>::extract;

  int levels() const override { return static_cast<int>(bank_.levels.size()); }
  const FeatureBank& bank() const { return bank_; }

  std::vector<ad::Var> extract(ad::Tape<T>& tape, ad::Var image) const override {
    // Dimensions are copied: recording nodes may reallocate the tape.
    require_shape(tape.value(image).channels() == 3, "feature extractor expects an RGB image");
    const int img_h = tape.value(image).height(), img_w = tape.value(image).width();
    std::vector<ad::Var> out;
    for (int l = 0; l < levels(); ++l) {
      const int h = std::max(1, img_h >> l);
      const int w = std::max(1, img_w >> l);
      const ad::Var src = (l == 0) ? image : ad::resize(tape, image, h, w);
      out.push_back(ad::relu(tape, ad::conv3x3_full(tape, src, weights_[l], bias_[l], pad_)));
    }
    return out;
  }

 private:
  FeatureBank bank_;
  PaddingMode pad_;
  std::vector<std::shared_ptr<const std::vector<T>>> weights_;
  std::vector<std::shared_ptr<const std::vector<T>>> bias_;
};

inline constexpr std::array<int, 5> kDefaultFeatureWidths{32, 64, 64, 128, 128};

/// Seeded He-normal random filter banks, widths 32, 64, 64, 128, 128, with
/// N(0, 0.1) biases. Nonzero biases keep a blank frame's features active.
inline FeatureBank random_feature_bank(std::uint64_t seed) {
  FeatureBank bank;
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / 27.0));
  for (int width : kDefaultFeatureWidths) {
    FeatureBankLevel level;
    level.in_channels = 3;
    level.out_channels = width;
    level.weights.resize(static_cast<std::size_t>(width) * 27);
    for (auto& v : level.weights) v = static_cast<float>(normal(gen));
    level.bias.resize(static_cast<std::size_t>(width));
    for (auto& v : level.bias) v = static_cast<float>(0.1 * normal(gen) / normal.stddev());
    bank.levels.push_back(std::move(level));
  }
  return bank;
}

template <class T = float>
std::shared_ptr<BasicFeatureExtractor<T>> default_extractor(std::uint64_t seed = 0) {
  return std::make_shared<FilterBankExtractor<T>>(random_feature_bank(seed));
}

// ---------------------------------------------------------------------------
// Optical flow backends

/// Differentiable two-frame flow backend.
template <class T>
class BasicFlowEstimator {
 public:
  virtual ~BasicFlowEstimator() = default;
  /// H x W x 2 flow from frame a to frame b (RGB grids in [-1, 1]).
  virtual ad::Var estimate(ad::Tape<T>& tape, ad::Var a, ad::Var b) const = 0;
  /// Per-pixel motion features for the video motion loss.
  virtual ad::Var features(ad::Tape<T>& tape, ad::Var a, ad::Var b) const = 0;

  BasicGrid<T> estimate(const BasicGrid<T>& a, const BasicGrid<T>& b) const {
    ad::Tape<T> tape;
    return tape.value(estimate(tape, tape.constant(a), tape.constant(b)));
  }
  BasicFeatureSet<T> features(const BasicGrid<T>& a, const BasicGrid<T>& b) const {
    ad::Tape<T> tape;
    return BasicFeatureSet<T>::from_grid(tape.value(features(tape, tape.constant(a), tape.constant(b))));
  }
};
using FlowEstimator = BasicFlowEstimator<float>;

struct HornSchunckOptions {
  int iterations = 30;
  double smoothness = 0.1;  // alpha^2 against squared luma gradients
  int presmooth = 2;        // binomial 3x3 blur passes before differentiation
};

/// Horn-Schunck flow unrolled for a fixed number of Jacobi iterations.
/// Luma is taken in the frames' native [-1, 1] range.
template <class T>
class HornSchunckFlow final : public BasicFlowEstimator<T> {
 public:
  explicit HornSchunckFlow(HornSchunckOptions opts = {}) : opts_(opts) {
    require(opts.iterations >= 1, "flow: iterations must be >= 1");
    require(opts.smoothness > 0, "flow: smoothness must be positive");
    require(opts.presmooth >= 0, "flow: presmooth passes must be >= 0");
  }

  using BasicFlowEstimator<T>::estimate;
  using BasicFlowEstimator<T>::features;

  const HornSchunckOptions& options() const { return opts_; }

  ad::Var estimate(ad::Tape<T>& tape, ad::Var a, ad::Var b) const override {
    return solve(tape, a, b).flow;
  }

  /// (u, v, residual, 1). The constant channel keeps rows of still frames
  /// nonzero, so two still pairs compare as identical.
  ad::Var features(ad::Tape<T>& tape, ad::Var a, ad::Var b) const override {
    const Solution s = solve(tape, a, b);
    const auto& r = tape.value(s.residual);
    const ad::Var one = tape.constant(BasicGrid<T>(r.height(), r.width(), 1, T(1)));
    return ad::concat_channels(tape, ad::concat_channels(tape, s.flow, s.residual), one);
  }

 private:
  struct Solution {
    ad::Var flow;
    ad::Var residual;
  };

  ad::Var luma(ad::Tape<T>& tape, ad::Var rgb) const {
    const auto& v = tape.value(rgb);
    require_shape(v.channels() == 3, "flow: frames must be RGB");
    const ad::Var w = tape.constant(BasicGrid<T>(3, 1, 1, std::vector<T>{T(0.299), T(0.587), T(0.114)}));
    ad::Var y = ad::dense(tape, rgb, w);
    for (int i = 0; i < opts_.presmooth; ++i) y = ad::conv3x3_depthwise(tape, y, blur(), PaddingMode::kReplicate);
    return y;
  }

  static BasicKernel3x3<T> blur() {
    return {T(1) / 16, T(2) / 16, T(1) / 16, T(2) / 16, T(4) / 16, T(2) / 16, T(1) / 16, T(2) / 16, T(1) / 16};
  }

  static BasicKernel3x3<T> neighbour_mean() {
    return {T(1) / 12, T(1) / 6, T(1) / 12, T(1) / 6, T(0), T(1) / 6, T(1) / 12, T(1) / 6, T(1) / 12};
  }

  Solution solve(ad::Tape<T>& tape, ad::Var a, ad::Var b) const {
    require_shape(tape.value(a).same_shape(tape.value(b)), "flow: frame shapes differ");
    const PaddingMode pad = PaddingMode::kReplicate;
    const ad::Var ia = luma(tape, a);
    const ad::Var ib = luma(tape, b);
    const ad::Var avg = ad::scale(tape, ad::add(tape, ia, ib), T(0.5));
    const ad::Var ix = ad::conv3x3_depthwise(tape, avg, kernels::sobel_x<T>(), pad);
    const ad::Var iy = ad::conv3x3_depthwise(tape, avg, kernels::sobel_y<T>(), pad);
    const ad::Var it = ad::sub(tape, ib, ia);
    const ad::Var den =
        ad::add_scalar(tape, ad::add(tape, ad::square(tape, ix), ad::square(tape, iy)), static_cast<T>(opts_.smoothness));
    const int h = tape.value(ia).height(), w = tape.value(ia).width();
    ad::Var u = tape.constant(BasicGrid<T>(h, w, 1));
    ad::Var v = tape.constant(BasicGrid<T>(h, w, 1));
    for (int k = 0; k < opts_.iterations; ++k) {
      const ad::Var ub = ad::conv3x3_depthwise(tape, u, neighbour_mean(), pad);
      const ad::Var vb = ad::conv3x3_depthwise(tape, v, neighbour_mean(), pad);
      const ad::Var r =
          ad::div(tape, ad::add(tape, ad::add(tape, ad::mul(tape, ix, ub), ad::mul(tape, iy, vb)), it), den);
      u = ad::sub(tape, ub, ad::mul(tape, ix, r));
      v = ad::sub(tape, vb, ad::mul(tape, iy, r));
    }
    const ad::Var residual = ad::add(tape, ad::add(tape, ad::mul(tape, ix, u), ad::mul(tape, iy, v)), it);
    return {ad::concat_channels(tape, u, v), residual};
  }

  HornSchunckOptions opts_;
};

template <class T = float>
std::shared_ptr<BasicFlowEstimator<T>> default_flow(HornSchunckOptions opts = {}) {
  return std::make_shared<HornSchunckFlow<T>>(opts);
}

// ---------------------------------------------------------------------------
// Appearance and video-motion losses

/// Row subsampling for the structure term: levels with more rows than
/// max_rows are compared on a random subset (0 disables sampling).
struct OtSampling {
  int max_rows = 1024;
  std::uint64_t seed = 0;
};

namespace detail {
inline std::shared_ptr<const std::vector<int>> sample_rows(int rows, int max_rows, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(rows));
  std::iota(idx.begin(), idx.end(), 0);
  if (max_rows <= 0 || rows <= max_rows) return std::make_shared<const std::vector<int>>(std::move(idx));
  std::mt19937_64 gen(seed);
  for (int i = 0; i < max_rows; ++i) {
    std::uniform_int_distribution<int> pick(i, rows - 1);
    std::swap(idx[i], idx[pick(gen)]);
  }
  idx.resize(static_cast<std::size_t>(max_rows));
  std::sort(idx.begin(), idx.end());
  return std::make_shared<const std::vector<int>>(std::move(idx));
}

// L_s + L_m between two feature grids, with structure-term subsampling.
template <class T>
ad::Var style_distance(ad::Tape<T>& t, ad::Var x, ad::Var y, const OtSampling& sampling, std::uint64_t salt) {
  const int nx = t.value(x).cells();
  const int ny = t.value(y).cells();
  ad::Var xs = x, ys = y;
  if (sampling.max_rows > 0 && (nx > sampling.max_rows || ny > sampling.max_rows)) {
    const std::uint64_t base = sampling.seed * 0x9e3779b97f4a7c15ULL + salt;
    auto ix = sample_rows(nx, sampling.max_rows, base);
    auto iy = nx == ny ? ix : sample_rows(ny, sampling.max_rows, base + 1);
    xs = ad::gather_cells(t, x, ix);
    ys = ad::gather_cells(t, y, iy);
  }
  return ad::add(t, ad::ot_structure(t, xs, ys), ad::ot_moment(t, x, y));
}
}  // namespace detail

namespace ad {

/// Target-side features, extracted once per training run.
template <class T>
std::vector<BasicGrid<T>> target_features(const BasicFeatureExtractor<T>& fx, const BasicGrid<T>& target) {
  Tape<T> tape;
  std::vector<BasicGrid<T>> out;
  for (Var v : fx.extract(tape, tape.constant(target))) out.push_back(tape.value(v));
  return out;
}

/// Mean over frames of the sum over levels of L_s + L_m.
template <class T>
Var appearance_loss(Tape<T>& t, std::span<const Var> frames, const std::vector<BasicGrid<T>>& target,
                    const BasicFeatureExtractor<T>& fx, const OtSampling& sampling = {}) {
  require(!frames.empty(), "appearance_loss: need at least one frame");
  require_shape(static_cast<int>(target.size()) == fx.levels(), "appearance_loss: target level count mismatch");
  Var total{};
  for (std::size_t k = 0; k < frames.size(); ++k) {
    const auto feats = fx.extract(t, frames[k]);
    for (std::size_t l = 0; l < feats.size(); ++l) {
      const Var y = t.constant(target[l]);
      const Var term = dynca::detail::style_distance(t, feats[l], y, sampling, l);
      total = total.valid() ? add(t, total, term) : term;
    }
  }
  return scale(t, total, T(1) / static_cast<T>(frames.size()));
}

/// Mean over consecutive pairs of L_s + L_m between motion features.
template <class T>
Var mvid_loss(Tape<T>& t, std::span<const std::pair<Var, Var>> generated,
              std::span<const BasicGrid<T>> target_pair_features, const BasicFlowEstimator<T>& flow,
              const OtSampling& sampling = {}) {
  require(!generated.empty(), "mvid_loss: need at least one frame pair");
  require(generated.size() == target_pair_features.size(), "mvid_loss: generated and target pair counts differ");
  Var total{};
  for (std::size_t k = 0; k < generated.size(); ++k) {
    const Var x = flow.features(t, generated[k].first, generated[k].second);
    const Var y = t.constant(target_pair_features[k]);
    const Var term = dynca::detail::style_distance(t, x, y, sampling, 100 + k);
    total = total.valid() ? add(t, total, term) : term;
  }
  return scale(t, total, T(1) / static_cast<T>(generated.size()));
}

}  // namespace ad

/// Appearance loss on plain images.
template <class T>
T appearance_loss(std::span<const BasicGrid<T>> frames, const BasicGrid<T>& target,
                  const BasicFeatureExtractor<T>& fx, const OtSampling& sampling = {}) {
  ad::Tape<T> tape;
  const auto tf = ad::target_features(fx, target);
  std::vector<ad::Var> vars;
  for (const auto& f : frames) vars.push_back(tape.constant(f));
  return tape.value(ad::appearance_loss(tape, std::span<const ad::Var>(vars), tf, fx, sampling))[0];
}

/// Video motion loss on plain frame pairs.
template <class T>
T mvid_loss(std::span<const std::pair<BasicGrid<T>, BasicGrid<T>>> generated,
            std::span<const std::pair<BasicGrid<T>, BasicGrid<T>>> target, const BasicFlowEstimator<T>& flow,
            const OtSampling& sampling = {}) {
  require(generated.size() == target.size(), "mvid_loss: generated and target pair counts differ");
  ad::Tape<T> tape;
  std::vector<std::pair<ad::Var, ad::Var>> gen;
  std::vector<BasicGrid<T>> tgt;
  for (const auto& [a, b] : generated) gen.emplace_back(tape.constant(a), tape.constant(b));
  for (const auto& [a, b] : target) {
    ad::Tape<T> scratch;
    tgt.push_back(scratch.value(flow.features(scratch, scratch.constant(a), scratch.constant(b))));
  }
  return tape.value(ad::mvid_loss(tape, std::span<const std::pair<ad::Var, ad::Var>>(gen),
                                  std::span<const BasicGrid<T>>(tgt), flow, sampling))[0];
}

}  // namespace dynca
