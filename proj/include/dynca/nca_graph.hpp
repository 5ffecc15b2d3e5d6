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

// Differentiable NCA step. One fused tape node per step keeps only the
// MLP inputs and hidden activations of the cells the mask selected; the
// mask itself is a constant of the backward pass.

#pragma once

#include <Eigen/Core>

#include <array>
#include <memory>
#include <span>
#include <vector>

#include "dynca/autodiff.hpp"
#include "dynca/model.hpp"

namespace dynca::ad {

/// Tape handles for the three parameter tensors of an update rule.
struct RuleVars {
  Var w1;
  Var b1;
  Var w2;
};

template <class T>
RuleVars rule_parameters(Tape<T>& t, const BasicUpdateRule<T>& rule) {
  return {t.parameter(BasicGrid<T>(rule.input_dim, 1, rule.hidden, rule.w1)),
          t.parameter(BasicGrid<T>(1, 1, rule.hidden, rule.b1)),
          t.parameter(BasicGrid<T>(rule.hidden, 1, rule.channels, rule.w2))};
}

namespace detail {

// Adjoint of perceive(): grad_p has 4C channels per cell.
template <class T>
void perceive_adjoint(const BasicGrid<T>& grad_p, PaddingMode pad, BasicGrid<T>& grad_in) {
  const int c = grad_in.channels();
  BasicGrid<T> bank_grad(grad_in.height(), grad_in.width(), 3 * c);
  for (int i = 0; i < grad_in.cells(); ++i) {
    const T* g = grad_p.data().data() + static_cast<std::size_t>(i) * 4 * c;
    T* gi = grad_in.data().data() + static_cast<std::size_t>(i) * c;
    for (int ch = 0; ch < c; ++ch) gi[ch] += g[ch];
    std::copy(g + c, g + 4 * c, bank_grad.data().data() + static_cast<std::size_t>(i) * 3 * c);
  }
  const std::array<BasicKernel3x3<T>, 3> bank{kernels::sobel_x<T>(), kernels::sobel_y<T>(),
                                              kernels::laplacian<T>()};
  stencil_bank_adjoint(bank_grad, std::span<const BasicKernel3x3<T>>(bank), pad, grad_in);
}

template <class T>
void perceive_multiscale_adjoint(const BasicGrid<T>& grad_p, const DyncaConfig& cfg, BasicGrid<T>& grad_in) {
  perceive_adjoint(grad_p, cfg.padding, grad_in);
  const int h = grad_in.height(), w = grad_in.width(), c = grad_in.channels();
  for (std::size_t i = 1; i < cfg.scales.size(); ++i) {
    const int s = cfg.scales[i];
    BasicGrid<T> coarse_p(h / s, w / s, 4 * c);
    bilinear_resize_adjoint(grad_p, coarse_p);
    BasicGrid<T> coarse(h / s, w / s, c);
    perceive_adjoint(coarse_p, cfg.padding, coarse);
    bilinear_resize_adjoint(coarse, grad_in);
  }
}

}  // namespace detail

/// One NCA step on the tape. `step_index` selects the mask row of the
/// counter-based RNG, exactly as NcaState::step_count does in the engine.
template <class T>
Var nca_step(Tape<T>& t, Var state, const RuleVars& p, const DyncaConfig& cfg, RngKey key,
             std::uint64_t step_index) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto& s = t.value(state);
  const int h = s.height(), w = s.width(), c = cfg.channels;
  require_shape(s.channels() == c, "nca_step: state channels != config channels");
  const int pdim = cfg.perception_dim(), in = cfg.input_dim(), fc = cfg.hidden;
  require_shape(t.value(p.w1).size() == static_cast<std::size_t>(in) * fc &&
                    t.value(p.b1).size() == static_cast<std::size_t>(fc) &&
                    t.value(p.w2).size() == static_cast<std::size_t>(fc) * c,
                "nca_step: parameter shapes do not match config");

  auto active = std::make_shared<std::vector<int>>();
  for (int r = 0; r < h; ++r)
    for (int col = 0; col < w; ++col)
      if (mask_bit(key, step_index, static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(col),
                   cfg.update_rate))
        active->push_back(r * w + col);
  const int n = static_cast<int>(active->size());
  BasicGrid<T> out = s;
  if (n == 0) return t.record(std::move(out), {state}, [state](Tape<T>& tp, int self) {
      tp.accumulate(state, tp.grad(self));
    });

  const BasicGrid<T> perception = perceive_multiscale(s, cfg);
  const BasicGrid<T> cpe = cfg.use_cpe ? positional_encoding<T>(h, w) : BasicGrid<T>{};
  auto z = std::make_shared<RowMat>(n, in);
  for (int i = 0; i < n; ++i) {
    const std::size_t cell = static_cast<std::size_t>((*active)[i]);
    std::copy_n(perception.data().data() + cell * pdim, pdim, z->data() + static_cast<std::size_t>(i) * in);
    if (cfg.use_cpe) {
      (*z)(i, pdim) = cpe[cell * 2];
      (*z)(i, pdim + 1) = cpe[cell * 2 + 1];
    }
  }
  const Eigen::Map<const RowMat> w1(t.value(p.w1).data().data(), in, fc);
  const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b1(t.value(p.b1).data().data(), fc);
  const Eigen::Map<const RowMat> w2(t.value(p.w2).data().data(), fc, c);
  auto hid = std::make_shared<RowMat>(n, fc);
  hid->noalias() = *z * w1;
  hid->rowwise() += b1;
  *hid = hid->cwiseMax(T(0));
  RowMat delta(n, c);
  delta.noalias() = *hid * w2;
  for (int i = 0; i < n; ++i) {
    T* o = out.data().data() + static_cast<std::size_t>((*active)[i]) * c;
    for (int ch = 0; ch < c; ++ch) o[ch] += delta(i, ch);
  }

  return t.record(std::move(out), {state, p.w1, p.b1, p.w2},
                  [state, p, cfg, active, z, hid, h, w, c, in, pdim, fc](Tape<T>& tp, int self) {
    const auto& g = tp.grad(self);
    tp.accumulate(state, g);
    const int n = static_cast<int>(active->size());
    RowMat gd(n, c);
    for (int i = 0; i < n; ++i)
      std::copy_n(g.data().data() + static_cast<std::size_t>((*active)[i]) * c, c,
                  gd.data() + static_cast<std::size_t>(i) * c);
    const Eigen::Map<const RowMat> w1(tp.value(p.w1).data().data(), in, fc);
    const Eigen::Map<const RowMat> w2(tp.value(p.w2).data().data(), fc, c);
    if (tp.requires_grad(p.w2)) {
      Eigen::Map<RowMat> gw2(tp.grad(p.w2).data().data(), fc, c);
      gw2.noalias() += hid->transpose() * gd;
    }
    RowMat gh(n, fc);
    gh.noalias() = gd * w2.transpose();
    gh = gh.cwiseProduct((hid->array() > T(0)).template cast<T>().matrix());
    if (tp.requires_grad(p.w1)) {
      Eigen::Map<RowMat> gw1(tp.grad(p.w1).data().data(), in, fc);
      gw1.noalias() += z->transpose() * gh;
    }
    if (tp.requires_grad(p.b1)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb1(tp.grad(p.b1).data().data(), fc);
      gb1 += gh.colwise().sum();
    }
    if (!tp.requires_grad(state)) return;
    RowMat gz(n, in);
    gz.noalias() = gh * w1.transpose();
    BasicGrid<T> gp(h, w, pdim);
    for (int i = 0; i < n; ++i)
      std::copy_n(gz.data() + static_cast<std::size_t>(i) * in, pdim,
                  gp.data().data() + static_cast<std::size_t>((*active)[i]) * pdim);
    detail::perceive_multiscale_adjoint(gp, cfg, tp.grad(state));
  });
}

/// Rolls `n` steps starting at `first_step`, returning the state Var after
/// every step (index k holds the state after k + 1 steps).
template <class T>
std::vector<Var> nca_rollout(Tape<T>& t, Var state, const RuleVars& p, const DyncaConfig& cfg, RngKey key,
                             std::uint64_t first_step, int n) {
  require(n >= 1, "nca_rollout: step count must be >= 1");
  std::vector<Var> states;
  states.reserve(static_cast<std::size_t>(n));
  Var cur = state;
  for (int k = 0; k < n; ++k) {
    cur = nca_step(t, cur, p, cfg, key, first_step + static_cast<std::uint64_t>(k));
    states.push_back(cur);
  }
  return states;
}

/// RGB view (first three channels) of a state Var.
template <class T>
Var rgb(Tape<T>& t, Var state) {
  return slice_channels(t, state, 0, 3);
}

}  // namespace dynca::ad
