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
#include <memory>
#include <numeric>

#include "dynca/autodiff.hpp"
#include "dynca/nca_graph.hpp"
#include "fd_check.hpp"
#include "pipeline_check.hpp"

namespace dynca {
namespace {

template <class G>
std::vector<double> values(const G& g) {
  return {g.storage().begin(), g.storage().end()};
}

using testing::fd_check;
using testing::Grid64;
using testing::random_grid64;
using testing::Tape64;
using ad::Var;

constexpr double kTol = 1e-6;

// Contracts v against fixed random weights so every entry gets a distinct
// upstream gradient.
Var probe(Tape64& t, Var v, std::uint64_t seed = 99) {
  const auto& val = t.value(v);
  const Var w = t.constant(random_grid64(val.height(), val.width(), val.channels(), seed));
  return ad::sum(t, ad::mul(t, v, w));
}

// Values kept away from the kink at zero.
Grid64 away_from_zero(int h, int w, int c, std::uint64_t seed) {
  Grid64 g = random_grid64(h, w, c, seed, 0.2, 1.0);
  std::mt19937_64 gen(seed + 1);
  for (auto& v : g.data())
    if (gen() & 1) v = -v;
  return g;
}

TEST(Tape, BackwardRequiresScalar) {
  Tape64 t;
  const Var x = t.parameter(Grid64(2, 2, 1));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape64 t;
  const Var c = t.constant(Grid64(1, 1, 1, 2.0));
  const Var p = t.parameter(Grid64(1, 1, 1, 3.0));
  const Var y = ad::mul(t, c, p);
  EXPECT_FALSE(t.requires_grad(ad::mul(t, c, c)));
  t.backward(y);
  EXPECT_FALSE(t.has_grad(c.id));
  EXPECT_DOUBLE_EQ(t.grad(p)[0], 2.0);
}

TEST(Tape, ValueReferencesSurviveRecording) {
  Tape64 t;
  const Var x = t.constant(Grid64(3, 3, 1, 2.0));
  const Grid64& held = t.value(x);
  for (int i = 0; i < 5000; ++i) t.constant(Grid64(1, 1, 1));
  EXPECT_EQ(&held, &t.value(x));
  EXPECT_EQ(held[4], 2.0);
}

TEST(Tape, FanOutAccumulates) {
  // y = x*x + 3x, dy/dx = 2x + 3.
  Tape64 t;
  const Var x = t.parameter(Grid64(1, 1, 1, 1.5));
  const Var y = ad::add(t, ad::mul(t, x, x), ad::scale(t, x, 3.0));
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 6.0);
}

TEST(Ops, ShapeMismatchThrows) {
  Tape64 t;
  const Var a = t.parameter(Grid64(2, 2, 1));
  const Var b = t.parameter(Grid64(2, 2, 2));
  EXPECT_THROW(ad::add(t, a, b), ShapeError);
  EXPECT_THROW(ad::mul(t, a, b), ShapeError);
}

TEST(Ops, ElementwiseGradients) {
  const Grid64 x = away_from_zero(3, 4, 2, 1);
  const Grid64 other = away_from_zero(3, 4, 2, 2);
  const std::vector<std::pair<const char*, testing::LossBuilder>> cases = {
      {"add", [&](Tape64& t, Var p) { return probe(t, ad::add(t, p, t.constant(other))); }},
      {"sub", [&](Tape64& t, Var p) { return probe(t, ad::sub(t, t.constant(other), p)); }},
      {"mul", [&](Tape64& t, Var p) { return probe(t, ad::mul(t, p, p)); }},
      {"div_num", [&](Tape64& t, Var p) { return probe(t, ad::div(t, p, t.constant(other))); }},
      {"div_den", [&](Tape64& t, Var p) { return probe(t, ad::div(t, t.constant(other), p)); }},
      {"scale", [&](Tape64& t, Var p) { return probe(t, ad::scale(t, p, -2.5)); }},
      {"add_scalar", [&](Tape64& t, Var p) { return probe(t, ad::square(t, ad::add_scalar(t, p, 0.7))); }},
      {"square", [&](Tape64& t, Var p) { return probe(t, ad::square(t, p)); }},
      {"relu", [&](Tape64& t, Var p) { return probe(t, ad::relu(t, p)); }},
      {"abs", [&](Tape64& t, Var p) { return probe(t, ad::abs(t, p)); }},
      {"min_scalar", [&](Tape64& t, Var p) { return probe(t, ad::min_scalar(t, p, 0.05)); }},
      {"mean", [&](Tape64& t, Var p) { return ad::mean(t, ad::square(t, p)); }},
  };
  for (const auto& [name, f] : cases) {
    const auto rep = fd_check(f, x);
    EXPECT_LT(rep.max_rel_err, kTol) << name;
  }
}

TEST(Ops, ReluAndMinValues) {
  Tape64 t;
  const Var x = t.constant(Grid64(1, 1, 3, std::vector<double>{-1.0, 0.0, 2.0}));
  EXPECT_EQ(values(t.value(ad::relu(t, x))), (std::vector<double>{0.0, 0.0, 2.0}));
  EXPECT_EQ(values(t.value(ad::min_scalar(t, x, 1.0))), (std::vector<double>{-1.0, 0.0, 1.0}));
  EXPECT_EQ(values(t.value(ad::abs(t, x))), (std::vector<double>{1.0, 0.0, 2.0}));
}

TEST(Ops, ChannelGradients) {
  const Grid64 x = random_grid64(3, 3, 5, 3);
  const Grid64 other = random_grid64(3, 3, 2, 4);
  EXPECT_LT(fd_check([](Tape64& t, Var p) { return probe(t, ad::slice_channels(t, p, 1, 3)); }, x).max_rel_err,
            kTol);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::concat_channels(t, t.constant(other), p)); }, x)
                .max_rel_err,
            kTol);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::concat_channels(t, p, ad::square(t, p))); }, x)
                .max_rel_err,
            kTol);
}

TEST(Ops, SliceAndConcatValues) {
  Tape64 t;
  const Var x = t.constant(Grid64(1, 2, 3, std::vector<double>{0, 1, 2, 3, 4, 5}));
  const Var s = ad::slice_channels(t, x, 1, 2);
  EXPECT_EQ(values(t.value(s)), (std::vector<double>{1, 2, 4, 5}));
  const Var c = ad::concat_channels(t, s, x);
  EXPECT_EQ(values(t.value(c)), (std::vector<double>{1, 2, 0, 1, 2, 4, 5, 3, 4, 5}));
  EXPECT_THROW(ad::slice_channels(t, x, 2, 2), ShapeError);
}

TEST(Ops, GatherScatterGradients) {
  auto cells = std::make_shared<const std::vector<int>>(std::vector<int>{4, 0, 7, 4});
  const Grid64 x = random_grid64(3, 3, 2, 5);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::gather_cells(t, p, cells)); }, x).max_rel_err,
            kTol);
  const Grid64 base = random_grid64(3, 3, 2, 6);
  const Grid64 delta = random_grid64(4, 1, 2, 7);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) {
              return probe(t, ad::scatter_add_cells(t, p, t.constant(delta), cells));
            }, base).max_rel_err,
            kTol);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) {
              return probe(t, ad::scatter_add_cells(t, t.constant(base), p, cells));
            }, delta).max_rel_err,
            kTol);
}

TEST(Ops, ScatterAddsRepeatedCells) {
  Tape64 t;
  auto cells = std::make_shared<const std::vector<int>>(std::vector<int>{1, 1});
  const Var base = t.constant(Grid64(1, 2, 1));
  const Var d = t.constant(Grid64(2, 1, 1, std::vector<double>{2.0, 3.0}));
  EXPECT_EQ(values(t.value(ad::scatter_add_cells(t, base, d, cells))), (std::vector<double>{0.0, 5.0}));
}

TEST(Ops, DenseGradients) {
  const Grid64 x = random_grid64(2, 3, 4, 8);
  const Grid64 w = random_grid64(4, 1, 5, 9);
  const Grid64 b = random_grid64(1, 1, 5, 10);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::dense(t, p, t.constant(w), t.constant(b))); }, x)
                .max_rel_err,
            kTol);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::dense(t, t.constant(x), p, t.constant(b))); }, w)
                .max_rel_err,
            kTol);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::dense(t, t.constant(x), t.constant(w), p)); }, b)
                .max_rel_err,
            kTol);
  EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::dense(t, p, t.constant(w))); }, x).max_rel_err,
            kTol);
}

TEST(Ops, DenseMatchesMatrixProduct) {
  Tape64 t;
  const Var x = t.constant(Grid64(1, 1, 2, std::vector<double>{1, 2}));
  const Var w = t.constant(Grid64(2, 1, 3, std::vector<double>{1, 2, 3, 4, 5, 6}));
  const Var b = t.constant(Grid64(1, 1, 3, std::vector<double>{0.5, 0, -1}));
  EXPECT_EQ(values(t.value(ad::dense(t, x, w, b))), (std::vector<double>{9.5, 12, 14}));
}

TEST(Ops, ConvolutionGradients) {
  const Grid64 x = random_grid64(5, 4, 3, 11);
  for (auto pad : {PaddingMode::kZero, PaddingMode::kReplicate, PaddingMode::kCircular}) {
    const std::vector<BasicKernel3x3<double>> bank{kernels::sobel_x<double>(), kernels::laplacian<double>()};
    EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::stencil(t, p, bank, pad)); }, x).max_rel_err,
              kTol)
        << padding_name(pad);
    auto weights = std::make_shared<const std::vector<double>>(values(random_grid64(1, 1, 2 * 3 * 9, 12)));
    auto bias = std::make_shared<const std::vector<double>>(std::vector<double>{0.1, -0.2});
    EXPECT_LT(fd_check([&](Tape64& t, Var p) { return probe(t, ad::conv3x3_full(t, p, weights, bias, pad)); }, x)
                  .max_rel_err,
              kTol)
        << padding_name(pad);
  }
}

TEST(Ops, ResizeGradients) {
  const Grid64 x = random_grid64(6, 8, 2, 13);
  for (auto [h, w] : {std::pair{3, 4}, std::pair{12, 16}, std::pair{5, 3}, std::pair{1, 1}})
    EXPECT_LT(fd_check([h = h, w = w](Tape64& t, Var p) { return probe(t, ad::resize(t, p, h, w)); }, x).max_rel_err,
              kTol)
        << h << "x" << w;
}

TEST(Ops, ComposedGraphGradient) {
  // A small conv-net style chain with fan-out.
  const Grid64 x = random_grid64(6, 6, 3, 14);
  auto weights = std::make_shared<const std::vector<double>>(values(random_grid64(1, 1, 4 * 3 * 9, 15)));
  auto bias = std::make_shared<const std::vector<double>>(std::vector<double>{0.0, 0.1, 0.2, -0.1});
  const auto f = [&](Tape64& t, Var p) {
    const Var c = ad::relu(t, ad::conv3x3_full(t, p, weights, bias, PaddingMode::kZero));
    const Var d = ad::resize(t, c, 3, 3);
    return ad::add(t, probe(t, d), ad::mean(t, ad::square(t, p)));
  };
  EXPECT_LT(fd_check(f, x).max_rel_err, 1e-5);
}

TEST(Optimizer, NormalizeGradientsPerLayer) {
  std::vector<std::vector<double>> layers{{3.0, 4.0}, {0.0, 0.0}, {-2.0}};
  ad::normalize_gradients(layers);
  EXPECT_DOUBLE_EQ(layers[0][0], 0.6);
  EXPECT_DOUBLE_EQ(layers[0][1], 0.8);
  EXPECT_EQ(layers[1], (std::vector<double>{0.0, 0.0}));
  EXPECT_DOUBLE_EQ(layers[2][0], -1.0);
}

TEST(Optimizer, AdamMatchesReference) {
  // Scalar reference recursion for three steps on fixed gradients.
  std::vector<double> p{1.0, -1.0};
  ad::AdamState st;
  st.lr = 0.01;
  const std::vector<std::vector<double>> gs{{0.5, -2.0}, {0.1, 1.0}, {-0.3, 0.0}};
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -1.0};
  for (int k = 0; k < 3; ++k) {
    std::vector<double>* ptrs[] = {&p};
    const std::vector<double> g = gs[static_cast<std::size_t>(k)];
    ad::adam_step<double>(std::span<std::vector<double>* const>(ptrs, 1), std::span<const std::vector<double>>(&g, 1),
                          st);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, k + 1));
      const double vh = v[i] / (1 - std::pow(0.999, k + 1));
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(p[0], ref[0], 1e-15);
    EXPECT_NEAR(p[1], ref[1], 1e-15);
  }
  EXPECT_EQ(st.step, 3);
}

TEST(Optimizer, AdamRejectsMismatch) {
  std::vector<double> p{1.0};
  std::vector<double>* ptrs[] = {&p};
  const std::vector<double> g{1.0, 2.0};
  ad::AdamState st;
  EXPECT_THROW(ad::adam_step<double>(std::span<std::vector<double>* const>(ptrs, 1),
                                     std::span<const std::vector<double>>(&g, 1), st),
               ShapeError);
}

// ---------------------------------------------------------------------------
// NCA step on the tape

DyncaConfig tiny_config(bool multiscale, float rate) {
  DyncaConfig cfg;
  cfg.channels = 4;
  cfg.hidden = 8;
  cfg.seed_h = cfg.seed_w = 8;
  cfg.scales = multiscale ? std::vector<int>{1, 2, 4} : std::vector<int>{1};
  cfg.update_rate = rate;
  return cfg;
}

BasicUpdateRule<double> random_rule(const DyncaConfig& cfg, std::uint64_t seed) {
  auto r = BasicUpdateRule<double>::initialized(cfg, seed);
  std::mt19937_64 gen(seed + 100);
  std::normal_distribution<double> n(0, 0.1);
  for (auto& v : r.w2) v = n(gen);
  return r;
}

TEST(NcaStep, ForwardMatchesEngineStep) {
  for (bool ms : {false, true}) {
    const DyncaConfig cfg = tiny_config(ms, 0.5f);
    const auto rule = random_rule(cfg, 1);
    BasicNcaState<double> s{random_grid64(8, 8, 4, 2, -0.5, 0.5), 5};
    Tape64 t;
    const auto p = ad::rule_parameters(t, rule);
    const Var out = ad::nca_step(t, t.constant(s.grid), p, cfg, RngKey{3}, 5);
    step_inplace(s, rule, cfg, RngKey{3});
    for (std::size_t i = 0; i < s.grid.size(); ++i) EXPECT_NEAR(t.value(out)[i], s.grid[i], 1e-12);
  }
}

TEST(NcaStep, StateAndParameterGradients) {
  for (bool ms : {false, true}) {
    for (PaddingMode pad : {PaddingMode::kReplicate, PaddingMode::kZero, PaddingMode::kCircular}) {
      DyncaConfig cfg = tiny_config(ms, 0.5f);
      cfg.padding = pad;
      const auto rule = random_rule(cfg, 4);
      const Grid64 s0 = random_grid64(8, 8, 4, 5, -0.5, 0.5);
      const auto through_state = [&](Tape64& t, Var p) {
        const auto rp = ad::rule_parameters(t, rule);
        const auto states = ad::nca_rollout(t, p, rp, cfg, RngKey{1}, 0, 3);
        return probe(t, states.back());
      };
      EXPECT_LT(fd_check(through_state, s0, 60).max_rel_err, 1e-5) << ms << padding_name(pad);
      const auto through_w1 = [&](Tape64& t, Var w1) {
        auto rp = ad::rule_parameters(t, rule);
        rp.w1 = w1;
        const auto states = ad::nca_rollout(t, t.constant(s0), rp, cfg, RngKey{1}, 0, 3);
        return probe(t, states.back());
      };
      const Grid64 w1(cfg.input_dim(), 1, cfg.hidden, rule.w1);
      EXPECT_LT(fd_check(through_w1, w1, 60).max_rel_err, 1e-5);
    }
  }
}

TEST(NcaStep, BiasAndSecondLayerGradients) {
  const DyncaConfig cfg = tiny_config(false, 1.0f);
  const auto rule = random_rule(cfg, 6);
  const Grid64 s0 = random_grid64(8, 8, 4, 7, -0.5, 0.5);
  const auto through_b1 = [&](Tape64& t, Var b1) {
    auto rp = ad::rule_parameters(t, rule);
    rp.b1 = b1;
    return probe(t, ad::nca_rollout(t, t.constant(s0), rp, cfg, RngKey{1}, 0, 2).back());
  };
  EXPECT_LT(fd_check(through_b1, Grid64(1, 1, cfg.hidden, rule.b1)).max_rel_err, 1e-5);
  const auto through_w2 = [&](Tape64& t, Var w2) {
    auto rp = ad::rule_parameters(t, rule);
    rp.w2 = w2;
    return probe(t, ad::nca_rollout(t, t.constant(s0), rp, cfg, RngKey{1}, 0, 2).back());
  };
  // eps 1e-5: at 1e-6 roundoff on near-zero entries reaches the tolerance.
  EXPECT_LT(fd_check(through_w2, Grid64(cfg.hidden, 1, cfg.channels, rule.w2), 0, 1e-5).max_rel_err, 1e-5);
}

TEST(NcaStep, ZeroSecondLayerIsIdentity) {
  const DyncaConfig cfg = tiny_config(false, 1.0f);
  const auto rule = BasicUpdateRule<double>::initialized(cfg, 1);
  Tape64 t;
  const Grid64 s0 = random_grid64(8, 8, 4, 8);
  const Var out = ad::nca_step(t, t.constant(s0), ad::rule_parameters(t, rule), cfg, RngKey{0}, 0);
  EXPECT_EQ(t.value(out), s0);
}

TEST(NcaStep, RejectsMismatchedParameters) {
  const DyncaConfig cfg = tiny_config(false, 1.0f);
  DyncaConfig other = cfg;
  other.hidden = 9;
  const auto rule = BasicUpdateRule<double>::initialized(other, 1);
  Tape64 t;
  EXPECT_THROW(ad::nca_step(t, t.constant(Grid64(8, 8, 4)), ad::rule_parameters(t, rule), cfg, RngKey{0}, 0),
               ShapeError);
}

TEST(Pipeline, MotionLossGradientMatchesFiniteDifferences) {
  const auto setup = testing::make_pipeline_setup();
  const auto rep = testing::pipeline_fd_check(setup, 50, 11);
  EXPECT_EQ(rep.probes, 50);
  EXPECT_LT(rep.max_rel_err, 1e-3);
}

TEST(Pipeline, SinglePrecisionGradientTracksDouble) {
  // The f32 instantiation of the same graph, against the f64 one.
  const auto s = testing::make_pipeline_setup();
  std::vector<double> g64;
  testing::pipeline_loss(s, s.rule, &g64);

  ad::Tape<float> t;
  const auto p = ad::rule_parameters(t, s.rule.cast<float>());
  const auto seed = make_seed<float>(s.cfg, 8, 8);
  const auto states = ad::nca_rollout(t, t.constant(seed.grid), p, s.cfg, s.key, 0, s.steps);
  const HornSchunckFlow<float> flow;
  const Var ug = flow.estimate(t, ad::rgb(t, states[static_cast<std::size_t>(s.t1 - 1)]), ad::rgb(t, states.back()));
  const Var loss = ad::mvec_loss(t, ug, t.constant(s.target.cast<float>()), s.t1, s.steps, s.cfg.frame_interval,
                                 static_cast<float>(s.gamma));
  t.backward(loss);
  std::vector<double> g32;
  for (Var v : {p.w1, p.b1, p.w2})
    for (float x : t.grad(v).data()) g32.push_back(x);
  ASSERT_EQ(g32.size(), g64.size());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < g64.size(); ++i) {
    num += (g32[i] - g64[i]) * (g32[i] - g64[i]);
    den += g64[i] * g64[i];
  }
  EXPECT_LT(std::sqrt(num / den), 1e-3);
}

}  // namespace
}  // namespace dynca
