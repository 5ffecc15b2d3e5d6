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

// Reverse-mode differentiation over the closed set of grid operations the
// engine and its losses use. Values are whole grids; every node records a
// closure that pushes its output gradient to its inputs.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dynca/common.hpp"
#include "dynca/grid.hpp"

namespace dynca::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  using Grid = BasicGrid<T>;
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var constant(Grid value) { return push(std::move(value), false, nullptr); }
  Var parameter(Grid value) { return push(std::move(value), true, nullptr); }

  /// Records an op node. It requires grad when any input does; the
  /// backward closure is dropped otherwise.
  Var record(Grid value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_.at(static_cast<std::size_t>(v.id)).requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Grid& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-initialized on first touch.
  Grid& grad(Var v) { return grad(v.id); }
  Grid& grad(int id) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) n.grad = Grid(n.value.height(), n.value.width(), n.value.channels());
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_.at(static_cast<std::size_t>(id)).grad.empty(); }

  /// Reverse sweep from a scalar node. Nodes are visited once, in reverse
  /// recording order.
  void backward(Var loss) {
    const Grid& lv = value(loss);
    require_shape(lv.size() == 1, "backward: loss must be a scalar, got " + lv.shape_string());
    grad(loss)[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward && !n.grad.empty()) n.backward(*this, id);
    }
  }

  /// Accumulates `g` into the gradient of `v` when v requires grad.
  void accumulate(Var v, const Grid& g) {
    if (!requires_grad(v)) return;
    Grid& dst = grad(v);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

 private:
  struct Node {
    Grid value;
    Grid grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const {
    require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), "tape: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Var push(Grid value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Grid{}, requires_grad, std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;  // stable references across record()
};

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {
template <class T>
void check_same(const Tape<T>& t, Var a, Var b, const char* op) {
  require_shape(t.value(a).same_shape(t.value(b)),
                std::string(op) + ": shape mismatch " + t.value(a).shape_string() + " vs " +
                    t.value(b).shape_string());
}

template <class T, class F>
BasicGrid<T> map(const BasicGrid<T>& a, F f) {
  BasicGrid<T> out(a.height(), a.width(), a.channels());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T, class F>
BasicGrid<T> zip(const BasicGrid<T>& a, const BasicGrid<T>& b, F f) {
  BasicGrid<T> out(a.height(), a.width(), a.channels());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

// Adds d(out)/d(in) * g into the grad of `in`, with the local derivative
// given per element.
template <class T, class D>
void push_elementwise(Tape<T>& t, int self, Var in, D local) {
  if (!t.requires_grad(in)) return;
  const BasicGrid<T>& g = t.grad(self);
  BasicGrid<T>& gi = t.grad(in);
  for (std::size_t i = 0; i < g.size(); ++i) gi[i] += local(i) * g[i];
}
}  // namespace detail

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  detail::check_same(t, a, b, "add");
  return t.record(detail::zip(t.value(a), t.value(b), [](T x, T y) { return x + y; }), {a, b},
                  [a, b](Tape<T>& tp, int self) {
                    tp.accumulate(a, tp.grad(self));
                    tp.accumulate(b, tp.grad(self));
                  });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  detail::check_same(t, a, b, "sub");
  return t.record(detail::zip(t.value(a), t.value(b), [](T x, T y) { return x - y; }), {a, b},
                  [a, b](Tape<T>& tp, int self) {
                    tp.accumulate(a, tp.grad(self));
                    detail::push_elementwise(tp, self, b, [](std::size_t) { return T(-1); });
                  });
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  detail::check_same(t, a, b, "mul");
  return t.record(detail::zip(t.value(a), t.value(b), [](T x, T y) { return x * y; }), {a, b},
                  [a, b](Tape<T>& tp, int self) {
                    const auto& va = tp.value(a);
                    const auto& vb = tp.value(b);
                    detail::push_elementwise(tp, self, a, [&](std::size_t i) { return vb[i]; });
                    detail::push_elementwise(tp, self, b, [&](std::size_t i) { return va[i]; });
                  });
}

template <class T>
Var div(Tape<T>& t, Var a, Var b) {
  detail::check_same(t, a, b, "div");
  return t.record(detail::zip(t.value(a), t.value(b), [](T x, T y) { return x / y; }), {a, b},
                  [a, b](Tape<T>& tp, int self) {
                    const auto& va = tp.value(a);
                    const auto& vb = tp.value(b);
                    detail::push_elementwise(tp, self, a, [&](std::size_t i) { return T(1) / vb[i]; });
                    detail::push_elementwise(tp, self, b,
                                             [&](std::size_t i) { return -va[i] / (vb[i] * vb[i]); });
                  });
}

template <class T>
Var scale(Tape<T>& t, Var a, T k) {
  return t.record(detail::map(t.value(a), [k](T x) { return k * x; }), {a},
                  [a, k](Tape<T>& tp, int self) {
                    detail::push_elementwise(tp, self, a, [k](std::size_t) { return k; });
                  });
}

template <class T>
Var add_scalar(Tape<T>& t, Var a, T k) {
  return t.record(detail::map(t.value(a), [k](T x) { return x + k; }), {a},
                  [a](Tape<T>& tp, int self) { tp.accumulate(a, tp.grad(self)); });
}

template <class T>
Var square(Tape<T>& t, Var a) {
  return t.record(detail::map(t.value(a), [](T x) { return x * x; }), {a},
                  [a](Tape<T>& tp, int self) {
                    const auto& va = tp.value(a);
                    detail::push_elementwise(tp, self, a, [&](std::size_t i) { return T(2) * va[i]; });
                  });
}

template <class T>
Var relu(Tape<T>& t, Var a) {
  return t.record(detail::map(t.value(a), [](T x) { return x > T(0) ? x : T(0); }), {a},
                  [a](Tape<T>& tp, int self) {
                    const auto& va = tp.value(a);
                    detail::push_elementwise(tp, self, a,
                                             [&](std::size_t i) { return va[i] > T(0) ? T(1) : T(0); });
                  });
}

template <class T>
Var abs(Tape<T>& t, Var a) {
  return t.record(detail::map(t.value(a), [](T x) { return x < T(0) ? -x : x; }), {a},
                  [a](Tape<T>& tp, int self) {
                    const auto& va = tp.value(a);
                    detail::push_elementwise(tp, self, a, [&](std::size_t i) {
                      return va[i] > T(0) ? T(1) : (va[i] < T(0) ? T(-1) : T(0));
                    });
                  });
}

/// min(a, k) elementwise; gradient passes where a < k.
template <class T>
Var min_scalar(Tape<T>& t, Var a, T k) {
  return t.record(detail::map(t.value(a), [k](T x) { return x < k ? x : k; }), {a},
                  [a, k](Tape<T>& tp, int self) {
                    const auto& va = tp.value(a);
                    detail::push_elementwise(tp, self, a,
                                             [&](std::size_t i) { return va[i] < k ? T(1) : T(0); });
                  });
}

template <class T>
Var sum(Tape<T>& t, Var a) {
  const auto& va = t.value(a);
  T acc = T(0);
  for (T x : va.data()) acc += x;
  return t.record(BasicGrid<T>(1, 1, 1, acc), {a}, [a](Tape<T>& tp, int self) {
    if (!tp.requires_grad(a)) return;
    const T g = tp.grad(self)[0];
    auto& gi = tp.grad(a);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g;
  });
}

template <class T>
Var mean(Tape<T>& t, Var a) {
  const auto& va = t.value(a);
  const T n = static_cast<T>(va.size());
  T acc = T(0);
  for (T x : va.data()) acc += x;
  return t.record(BasicGrid<T>(1, 1, 1, acc / n), {a}, [a, n](Tape<T>& tp, int self) {
    if (!tp.requires_grad(a)) return;
    const T g = tp.grad(self)[0] / n;
    auto& gi = tp.grad(a);
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Channel layout

template <class T>
Var slice_channels(Tape<T>& t, Var a, int begin, int count) {
  const auto& va = t.value(a);
  require_shape(begin >= 0 && count >= 1 && begin + count <= va.channels(),
                "slice_channels: range outside " + va.shape_string());
  BasicGrid<T> out(va.height(), va.width(), count);
  const int c = va.channels();
  for (int i = 0; i < va.cells(); ++i)
    for (int k = 0; k < count; ++k)
      out[static_cast<std::size_t>(i) * count + k] = va[static_cast<std::size_t>(i) * c + begin + k];
  return t.record(std::move(out), {a}, [a, begin, count, c](Tape<T>& tp, int self) {
    if (!tp.requires_grad(a)) return;
    const auto& g = tp.grad(self);
    auto& gi = tp.grad(a);
    const int cells = gi.cells();
    for (int i = 0; i < cells; ++i)
      for (int k = 0; k < count; ++k)
        gi[static_cast<std::size_t>(i) * c + begin + k] += g[static_cast<std::size_t>(i) * count + k];
  });
}

template <class T>
Var concat_channels(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  require_shape(va.height() == vb.height() && va.width() == vb.width(),
                "concat_channels: spatial shape mismatch");
  const int ca = va.channels(), cb = vb.channels();
  BasicGrid<T> out(va.height(), va.width(), ca + cb);
  for (int i = 0; i < va.cells(); ++i) {
    std::copy_n(va.data().data() + static_cast<std::size_t>(i) * ca, ca,
                out.data().data() + static_cast<std::size_t>(i) * (ca + cb));
    std::copy_n(vb.data().data() + static_cast<std::size_t>(i) * cb, cb,
                out.data().data() + static_cast<std::size_t>(i) * (ca + cb) + ca);
  }
  return t.record(std::move(out), {a, b}, [a, b, ca, cb](Tape<T>& tp, int self) {
    const auto& g = tp.grad(self);
    const int cells = g.cells();
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad(a);
      for (int i = 0; i < cells; ++i)
        for (int k = 0; k < ca; ++k)
          ga[static_cast<std::size_t>(i) * ca + k] += g[static_cast<std::size_t>(i) * (ca + cb) + k];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad(b);
      for (int i = 0; i < cells; ++i)
        for (int k = 0; k < cb; ++k)
          gb[static_cast<std::size_t>(i) * cb + k] += g[static_cast<std::size_t>(i) * (ca + cb) + ca + k];
    }
  });
}

/// Rows `cells` of a grid, as an (n x 1 x C) grid.
template <class T>
Var gather_cells(Tape<T>& t, Var a, std::shared_ptr<const std::vector<int>> cells) {
  const auto& va = t.value(a);
  const int c = va.channels();
  const int n = static_cast<int>(cells->size());
  require_shape(n >= 1, "gather_cells: empty index set");
  BasicGrid<T> out(n, 1, c);
  for (int i = 0; i < n; ++i)
    std::copy_n(va.data().data() + static_cast<std::size_t>((*cells)[i]) * c, c,
                out.data().data() + static_cast<std::size_t>(i) * c);
  return t.record(std::move(out), {a}, [a, cells, c](Tape<T>& tp, int self) {
    if (!tp.requires_grad(a)) return;
    const auto& g = tp.grad(self);
    auto& gi = tp.grad(a);
    for (std::size_t i = 0; i < cells->size(); ++i)
      for (int k = 0; k < c; ++k)
        gi[static_cast<std::size_t>((*cells)[i]) * c + k] += g[i * c + k];
  });
}

/// base + delta scattered onto the given cells (delta is n x 1 x C).
template <class T>
Var scatter_add_cells(Tape<T>& t, Var base, Var delta, std::shared_ptr<const std::vector<int>> cells) {
  const auto& vb = t.value(base);
  const auto& vd = t.value(delta);
  const int c = vb.channels();
  require_shape(vd.channels() == c && vd.cells() == static_cast<int>(cells->size()),
                "scatter_add_cells: delta shape mismatch");
  BasicGrid<T> out = vb;
  for (std::size_t i = 0; i < cells->size(); ++i)
    for (int k = 0; k < c; ++k) out[static_cast<std::size_t>((*cells)[i]) * c + k] += vd[i * c + k];
  return t.record(std::move(out), {base, delta}, [base, delta, cells, c](Tape<T>& tp, int self) {
    const auto& g = tp.grad(self);
    tp.accumulate(base, g);
    if (!tp.requires_grad(delta)) return;
    auto& gd = tp.grad(delta);
    for (std::size_t i = 0; i < cells->size(); ++i)
      for (int k = 0; k < c; ++k) gd[i * c + k] += g[static_cast<std::size_t>((*cells)[i]) * c + k];
  });
}

// ---------------------------------------------------------------------------
// Linear maps

/// Per-cell affine map: out = x * W (+ b). W is stored as an (in x 1 x out)
/// grid, b as (1 x 1 x out). Pass an invalid Var for no bias.
template <class T>
Var dense(Tape<T>& t, Var x, Var w, Var b = {}) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto& vx = t.value(x);
  const auto& vw = t.value(w);
  const int n = vx.cells(), in = vx.channels(), out_dim = vw.channels();
  require_shape(vw.height() == in && vw.width() == 1, "dense: weight rows must equal input channels");
  BasicGrid<T> out(vx.height(), vx.width(), out_dim);
  Eigen::Map<const RowMat> X(vx.data().data(), n, in);
  Eigen::Map<const RowMat> W(vw.data().data(), in, out_dim);
  Eigen::Map<RowMat> Y(out.data().data(), n, out_dim);
  Y.noalias() = X * W;
  if (b.valid()) {
    const auto& vb = t.value(b);
    require_shape(vb.size() == static_cast<std::size_t>(out_dim), "dense: bias size mismatch");
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(vb.data().data(), out_dim);
  }
  auto backward = [x, w, b, n, in, out_dim](Tape<T>& tp, int self) {
    const auto& g = tp.grad(self);
    Eigen::Map<const RowMat> G(g.data().data(), n, out_dim);
    if (tp.requires_grad(x)) {
      Eigen::Map<RowMat> GX(tp.grad(x).data().data(), n, in);
      Eigen::Map<const RowMat> W(tp.value(w).data().data(), in, out_dim);
      GX.noalias() += G * W.transpose();
    }
    if (tp.requires_grad(w)) {
      Eigen::Map<RowMat> GW(tp.grad(w).data().data(), in, out_dim);
      Eigen::Map<const RowMat> X(tp.value(x).data().data(), n, in);
      GW.noalias() += X.transpose() * G;
    }
    if (b.valid() && tp.requires_grad(b)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(tp.grad(b).data().data(), out_dim);
      GB += G.colwise().sum();
    }
  };
  if (b.valid()) return t.record(std::move(out), {x, w, b}, backward);
  return t.record(std::move(out), {x, w}, backward);
}

/// Depthwise application of a kernel bank (block channel layout, see
/// stencil_bank).
template <class T>
Var stencil(Tape<T>& t, Var x, std::vector<BasicKernel3x3<T>> bank, PaddingMode pad) {
  BasicGrid<T> out = stencil_bank(t.value(x), std::span<const BasicKernel3x3<T>>(bank), pad);
  return t.record(std::move(out), {x}, [x, bank = std::move(bank), pad](Tape<T>& tp, int self) {
    if (!tp.requires_grad(x)) return;
    stencil_bank_adjoint(tp.grad(self), std::span<const BasicKernel3x3<T>>(bank), pad, tp.grad(x));
  });
}

template <class T>
Var conv3x3_depthwise(Tape<T>& t, Var x, const BasicKernel3x3<T>& k, PaddingMode pad) {
  return stencil(t, x, std::vector<BasicKernel3x3<T>>{k}, pad);
}

/// Full 3x3 convolution with fixed (non-trainable) weights.
template <class T>
Var conv3x3_full(Tape<T>& t, Var x, std::shared_ptr<const std::vector<T>> weights,
                 std::shared_ptr<const std::vector<T>> bias, PaddingMode pad) {
  const int cout = static_cast<int>(bias->size());
  BasicGrid<T> out = dynca::conv3x3_full(t.value(x), std::span<const T>(*weights),
                                         std::span<const T>(*bias), cout, pad);
  return t.record(std::move(out), {x}, [x, weights, pad](Tape<T>& tp, int self) {
    if (!tp.requires_grad(x)) return;
    conv3x3_full_adjoint(tp.grad(self), std::span<const T>(*weights), pad, tp.grad(x));
  });
}

template <class T>
Var resize(Tape<T>& t, Var x, int out_h, int out_w) {
  BasicGrid<T> out = bilinear_resize(t.value(x), out_h, out_w);
  return t.record(std::move(out), {x}, [x](Tape<T>& tp, int self) {
    if (!tp.requires_grad(x)) return;
    bilinear_resize_adjoint(tp.grad(self), tp.grad(x));
  });
}

// ---------------------------------------------------------------------------
// Optimization

/// Scales each layer's gradient to unit L2 norm; all-zero layers stay zero.
template <class T>
void normalize_gradients(std::span<std::vector<T>> layers) {
  for (auto& g : layers) {
    double sq = 0.0;
    for (T v : g) sq += static_cast<double>(v) * static_cast<double>(v);
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (T& v : g) v = static_cast<T>(static_cast<double>(v) * inv);
  }
}

template <class T>
void normalize_gradients(std::vector<std::vector<T>>& layers) {
  normalize_gradients(std::span<std::vector<T>>(layers));
}

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
  long long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update of every parameter tensor.
template <class T>
void adam_step(std::span<std::vector<T>* const> params, std::span<const std::vector<T>> grads,
               AdamState& state) {
  require_shape(params.size() == grads.size(), "adam_step: parameter/gradient count mismatch");
  require(state.lr > 0, "adam_step: learning rate must be positive");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  require_shape(state.m.size() == params.size(), "adam_step: optimizer state has wrong layer count");
  for (std::size_t l = 0; l < params.size(); ++l)
    require_shape(params[l]->size() == grads[l].size() && state.m[l].size() == grads[l].size(),
                  "adam_step: shape mismatch in layer " + std::to_string(l));
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto& p = *params[l];
    auto& m = state.m[l];
    auto& v = state.v[l];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = static_cast<double>(grads[l][i]);
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

}  // namespace dynca::ad
