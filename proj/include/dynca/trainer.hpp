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


// Training loop: checkpoint pool, vector-field and video epochs, loss
// weighting, lambda automation and the learning-rate schedule.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dynca/losses.hpp"
#include "dynca/motion_fields.hpp"
#include "dynca/nca_graph.hpp"
#include "dynca/weights_io.hpp"

namespace dynca {

enum class TrainMode { kVectorField, kVideo, kStyleTransfer };

inline std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kVectorField: return "vec";
    case TrainMode::kVideo: return "video";
    case TrainMode::kStyleTransfer: return "style";
  }
  return "?";
}

inline std::optional<TrainMode> parse_mode(std::string_view s) {
  for (TrainMode m : {TrainMode::kVectorField, TrainMode::kVideo, TrainMode::kStyleTransfer})
    if (mode_name(m) == s) return m;
  return std::nullopt;
}

/// Ages are capped so long runs never overflow the step counter.
inline constexpr std::uint64_t kMaxPoolAge = 1000000;

/// Reservoir of evolved states reused across epochs.
class CheckpointPool {
 public:
  CheckpointPool(const DyncaConfig& cfg, int h, int w, int capacity = 256, int reseed_period = 8)
      : seed_(make_seed<float>(cfg, h, w)), reseed_period_(reseed_period) {
    require(capacity >= 1, "pool: capacity must be >= 1");
    require(reseed_period >= 1, "pool: reseed period must be >= 1");
    entries_.assign(static_cast<std::size_t>(capacity), seed_);
    checked_out_.assign(entries_.size(), false);
  }

  int size() const { return static_cast<int>(entries_.size()); }
  int reseed_period() const { return reseed_period_; }
  long long reseed_events() const { return reseed_events_; }
  const NcaState& seed() const { return seed_; }
  const NcaState& at(int i) const { return entries_.at(static_cast<std::size_t>(i)); }
  bool checked_out(int i) const { return checked_out_.at(static_cast<std::size_t>(i)); }

  /// Distinct indices drawn uniformly; the entries are marked checked out.
  std::vector<int> sample(int batch, std::mt19937_64& gen) {
    require(batch >= 1, "pool: batch must be >= 1");
    require(batch <= size(), "pool: batch " + std::to_string(batch) + " exceeds pool size " + std::to_string(size()));
    std::vector<int> idx(entries_.size());
    for (int i = 0; i < size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < batch; ++i) {
      std::uniform_int_distribution<int> pick(i, size() - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(gen))]);
    }
    idx.resize(static_cast<std::size_t>(batch));
    for (int i : idx) {
      require(!checked_out_[static_cast<std::size_t>(i)], "pool: entry already checked out");
      checked_out_[static_cast<std::size_t>(i)] = true;
    }
    return idx;
  }

  /// Returns an evolved state to its slot.
  void put(int i, NcaState state) {
    require_shape(state.grid.same_shape(seed_.grid), "pool: returned state has the wrong shape");
    state.step_count = std::min(state.step_count, kMaxPoolAge);
    entries_.at(static_cast<std::size_t>(i)) = std::move(state);
    checked_out_[static_cast<std::size_t>(i)] = false;
  }

  void reseed(int i) {
    entries_.at(static_cast<std::size_t>(i)) = seed_;
    ++reseed_events_;
  }

  /// True when the epoch (0-based) closes a reseed period.
  bool reseed_due(long long epoch) const { return (epoch + 1) % reseed_period_ == 0; }

 private:
  NcaState seed_;
  int reseed_period_;
  std::vector<NcaState> entries_;
  std::vector<bool> checked_out_;
  long long reseed_events_ = 0;
};

struct TrainPlan {
  TrainMode mode = TrainMode::kVectorField;
  int epochs = 4000;
  double lr = 1e-3;
  std::vector<int> lr_milestones{1000, 2000};
  double lr_decay = 0.3;
  int batch = 4;
  double gamma = 1.5;
  double overflow_weight = 100.0;
  double lambda = 10.0;
  bool anneal_lambda = true;  // vector-field mode only
  bool motion_enabled = true;
  int min_steps = 32;  // per-epoch step budget, inclusive range
  int max_steps = 128;
  int pair_gap = 64;   // video mode: steps between the two generated images
  int pool_size = 256;
  int reseed_period = 8;
  std::uint64_t seed = 0;
  OtSampling sampling{};

  void validate() const {
    require(epochs >= 1, "plan: epochs must be >= 1");
    require(lr > 0 && lr_decay > 0, "plan: learning rate and decay must be positive");
    require(batch >= 1 && batch <= pool_size, "plan: batch must be in [1, pool size]");
    require(gamma >= 0 && overflow_weight >= 0 && lambda >= 0, "plan: loss weights must be >= 0");
    require(min_steps >= 1 && min_steps <= max_steps, "plan: bad step budget");
    if (mode != TrainMode::kVectorField)
      require(pair_gap >= 1 && pair_gap < min_steps, "plan: pair gap must be shorter than the step budget");
  }

  /// Mode defaults: T=24, c=100, lambda0=10 for vector fields; T=64, c=1,
  /// 80..144 steps for video. Batch 4 at 128^2, 3 at 256^2.
  static TrainPlan defaults(TrainMode mode, int seed_size) {
    TrainPlan p;
    p.mode = mode;
    p.batch = seed_size >= 256 ? 3 : 4;
    if (mode == TrainMode::kVectorField) return p;
    p.overflow_weight = 1.0;
    p.lambda = 5.0;
    p.anneal_lambda = false;
    p.min_steps = 80;
    p.max_steps = 144;
    p.pair_gap = 64;
    return p;
  }
};

/// Frame interval for a mode.
inline int default_frame_interval(TrainMode mode) { return mode == TrainMode::kVectorField ? 24 : 64; }

/// 0.001 before the first milestone, times 0.3 at each milestone reached.
inline double lr_at(const TrainPlan& plan, long long epoch) {
  double lr = plan.lr;
  for (int m : plan.lr_milestones)
    if (epoch >= m) lr *= plan.lr_decay;
  return lr;
}

/// lambda0 * min(1, current / initial).
inline double anneal_lambda_vec(double lambda0, double appr_initial, double appr_current) {
  if (!(appr_initial > 0)) return lambda0;
  return lambda0 * std::min(1.0, appr_current / appr_initial);
}

inline constexpr double kMinAutoLambda = 0.05;

/// Affine map from the probe's median motion loss to lambda.
inline double lambda_from_median(double median, int seed_size) {
  const double lambda = seed_size >= 256 ? 6.04 * median - 2.17 : 5.82 * median - 1.05;
  return std::max(kMinAutoLambda, lambda);
}

/// Appearance image plus either a vector field or a target video.
struct TargetSpec {
  Grid appearance;  // H x W x 3 in [-1, 1]
  std::variant<Grid, std::vector<Grid>> motion;
  std::optional<double> lambda_override;

  bool has_field() const { return std::holds_alternative<Grid>(motion); }
  const Grid& field() const { return std::get<Grid>(motion); }
  const std::vector<Grid>& video() const { return std::get<std::vector<Grid>>(motion); }
};

struct EpochMetrics {
  long long epoch = 0;
  double lr = 0;
  double l_appr = 0;
  double l_motion = 0;
  double l_over = 0;
  double lambda = 0;
  int steps = 0;
  int overflow_terms = 0;
  bool reseeded = false;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},   {"lr", lr},         {"L_appr", l_appr},
            {"L_motion", l_motion}, {"L_over", l_over}, {"lambda", lambda},
            {"steps", steps},   {"reseeded", reseeded}};
  }
};

/// One batch element's rollout as seen by an objective.
struct ElementContext {
  ad::Tape<float>& tape;
  ad::Var start;                       // pool state, constant
  const std::vector<ad::Var>& states;  // after each step
  std::uint64_t t1 = 0;                // age of the pool state
  int batch_index = 0;
};

struct ObjectiveTerms {
  ad::Var appearance;  // scalar
  ad::Var motion;      // scalar, invalid when unused
};

/// Appearance and motion terms of one element. The overflow term is added by
/// the trainer on the last state.
using Objective = std::function<ObjectiveTerms(const ElementContext&)>;

class Trainer {
 public:
  Trainer(DyncaConfig cfg, TrainPlan plan, TargetSpec target,
          std::shared_ptr<const FeatureExtractor> extractor = default_extractor(),
          std::shared_ptr<const FlowEstimator> flow = default_flow())
      : cfg_(std::move(cfg)),
        plan_(std::move(plan)),
        target_(std::move(target)),
        extractor_(std::move(extractor)),
        flow_(std::move(flow)),
        rule_(UpdateRule::initialized(cfg_, plan_.seed)),
        pool_(cfg_, cfg_.seed_h, cfg_.seed_w, plan_.pool_size, plan_.reseed_period),
        gen_(plan_.seed) {
    cfg_.validate();
    plan_.validate();
    require(extractor_ && flow_, "trainer: backends must not be null");
    require_shape(target_.appearance.channels() == 3, "trainer: appearance target must be RGB");
    if (plan_.mode == TrainMode::kVectorField) {
      require(target_.has_field(), "trainer: vector-field mode needs a motion field");
      require_shape(target_.field().height() == cfg_.seed_h && target_.field().width() == cfg_.seed_w &&
                        target_.field().channels() == 2,
                    "trainer: motion field " + target_.field().shape_string() + " does not match the seed");
    } else {
      require(!target_.has_field(), "trainer: video mode needs target frames");
      require(target_.video().size() >= 2, "trainer: target video needs at least 2 frames");
      for (const Grid& f : target_.video())
        require_shape(f.channels() == 3 && f.same_shape(target_.video().front()),
                      "trainer: target frames must share one RGB shape");
    }
    lambda_ = target_.lambda_override.value_or(plan_.lambda);
    appearance_features_ = ad::target_features(*extractor_, target_.appearance);
    if (!target_.has_field()) {
      for (std::size_t k = 0; k + 1 < target_.video().size(); ++k) {
        ad::Tape<float> scratch;
        const ad::Var f = flow_->features(scratch, scratch.constant(target_.video()[k]),
                                          scratch.constant(target_.video()[k + 1]));
        target_pairs_.push_back(scratch.value(f));
      }
    }
    objective_ = [this](const ElementContext& ctx) { return default_objective(ctx); };
  }

  const DyncaConfig& config() const { return cfg_; }
  const TrainPlan& plan() const { return plan_; }
  const UpdateRule& rule() const { return rule_; }
  UpdateRule& rule() { return rule_; }
  const CheckpointPool& pool() const { return pool_; }
  double lambda() const { return lambda_; }
  long long epoch() const { return epoch_; }
  void set_lambda(double l) {
    require(l >= 0, "trainer: lambda must be >= 0");
    lambda_ = l;
  }

  /// Replaces the loss terms, e.g. with stubs for a schedule dry run.
  void set_objective(Objective obj) { objective_ = std::move(obj); }

  /// Fresh rule, pool, optimizer and RNG.
  void reset() {
    rule_ = UpdateRule::initialized(cfg_, plan_.seed);
    pool_ = CheckpointPool(cfg_, cfg_.seed_h, cfg_.seed_w, plan_.pool_size, plan_.reseed_period);
    gen_.seed(plan_.seed);
    adam_ = {};
    epoch_ = 0;
    appr_initial_.reset();
    lambda_ = target_.lambda_override.value_or(plan_.lambda);
  }

  /// Runs one epoch and returns its metrics.
  EpochMetrics train_epoch() {
    EpochMetrics m;
    m.epoch = epoch_;
    m.lr = lr_at(plan_, epoch_);
    m.lambda = lambda_;
    std::uniform_int_distribution<int> budget(plan_.min_steps, plan_.max_steps);
    const int steps = budget(gen_);
    m.steps = steps;
    const std::vector<int> idx = pool_.sample(plan_.batch, gen_);

    std::vector<std::vector<float>> grads{std::vector<float>(rule_.w1.size(), 0.0f),
                                          std::vector<float>(rule_.b1.size(), 0.0f),
                                          std::vector<float>(rule_.w2.size(), 0.0f)};
    std::vector<double> element_loss(idx.size());
    const float inv_b = 1.0f / static_cast<float>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      ad::Tape<float> tape;
      const ad::RuleVars p = ad::rule_parameters(tape, rule_);
      const NcaState& start = pool_.at(idx[b]);
      const ad::Var x0 = tape.constant(start.grid);
      const RngKey key{detail::mix64(plan_.seed ^ detail::mix64(static_cast<std::uint64_t>(epoch_) * 131 + b))};
      const auto states = ad::nca_rollout(tape, x0, p, cfg_, key, start.step_count, steps);
      const ElementContext ctx{tape, x0, states, start.step_count, static_cast<int>(b)};
      const ObjectiveTerms terms = objective_(ctx);
      const ad::Var over = ad::overflow_loss(tape, states.back());
      ++m.overflow_terms;
      ad::Var total = ad::add(tape, terms.appearance, ad::scale(tape, over, static_cast<float>(plan_.overflow_weight)));
      double motion_value = 0;
      if (terms.motion.valid()) {
        total = ad::add(tape, total, ad::scale(tape, terms.motion, static_cast<float>(lambda_)));
        motion_value = tape.value(terms.motion)[0];
      }
      total = ad::scale(tape, total, inv_b);
      tape.backward(total);
      const ad::Var pv[3] = {p.w1, p.b1, p.w2};
      for (int l = 0; l < 3; ++l) {
        if (!tape.has_grad(pv[l].id)) continue;
        const auto& g = tape.grad(pv[l]).data();
        for (std::size_t i = 0; i < g.size(); ++i) grads[static_cast<std::size_t>(l)][i] += g[i];
      }
      m.l_appr += tape.value(terms.appearance)[0] / idx.size();
      m.l_motion += motion_value / idx.size();
      m.l_over += tape.value(over)[0] / idx.size();
      element_loss[b] = tape.value(total)[0];
      NcaState evolved{tape.value(states.back()), start.step_count + static_cast<std::uint64_t>(steps)};
      pool_.put(idx[b], std::move(evolved));
    }

    ad::normalize_gradients(grads);
    adam_.lr = m.lr;
    std::vector<float>* params[3] = {&rule_.w1, &rule_.b1, &rule_.w2};
    ad::adam_step(std::span<std::vector<float>* const>(params, 3),
                  std::span<const std::vector<float>>(grads), adam_);

    if (pool_.reseed_due(epoch_)) {
      const auto worst = std::max_element(element_loss.begin(), element_loss.end()) - element_loss.begin();
      pool_.reseed(idx[static_cast<std::size_t>(worst)]);
      m.reseeded = true;
    }
    if (plan_.mode == TrainMode::kVectorField && plan_.anneal_lambda && !target_.lambda_override) {
      if (!appr_initial_) appr_initial_ = m.l_appr;
      lambda_ = anneal_lambda_vec(plan_.lambda, *appr_initial_, m.l_appr);
    }
    ++epoch_;
    return m;
  }

  /// Runs `epochs` epochs (plan.epochs when negative), writing one JSON line
  /// per epoch to `metrics` when given. Setting `stop` ends the run after the
  /// current epoch.
  void run(long long epochs = -1, std::ostream* metrics = nullptr,
           const std::function<void(const EpochMetrics&)>& on_epoch = {},
           const std::atomic<bool>* stop = nullptr) {
    const long long n = epochs < 0 ? plan_.epochs : epochs;
    for (long long e = 0; e < n && !(stop && *stop); ++e) {
      const EpochMetrics m = train_epoch();
      if (metrics) *metrics << m.to_json().dump() << '\n';
      if (on_epoch) on_epoch(m);
    }
    if (metrics) metrics->flush();
  }

  ObjectiveTerms default_objective(const ElementContext& ctx) const {
    ad::Tape<float>& t = ctx.tape;
    const ad::Var last = ctx.states.back();
    ObjectiveTerms terms;
    if (plan_.mode == TrainMode::kVectorField) {
      const ad::Var img2 = ad::rgb(t, last);
      const ad::Var frames[1] = {img2};
      terms.appearance = ad::appearance_loss(t, std::span<const ad::Var>(frames), appearance_features_, *extractor_,
                                             sampling_for(ctx));
      if (plan_.motion_enabled) {
        const ad::Var img1 = ad::rgb(t, ctx.start);
        const ad::Var ug = flow_->estimate(t, img1, img2);
        const long long t1 = static_cast<long long>(ctx.t1);
        const long long t2 = t1 + static_cast<long long>(ctx.states.size());
        terms.motion = ad::mvec_loss(t, ug, t.constant(target_.field()), t1, t2, cfg_.frame_interval,
                                     static_cast<float>(plan_.gamma));
      }
      return terms;
    }
    const std::size_t n = ctx.states.size();
    const ad::Var a = ad::rgb(t, ctx.states[n - 1 - static_cast<std::size_t>(plan_.pair_gap)]);
    const ad::Var b = ad::rgb(t, last);
    const ad::Var frames[2] = {a, b};
    terms.appearance =
        ad::appearance_loss(t, std::span<const ad::Var>(frames), appearance_features_, *extractor_, sampling_for(ctx));
    if (plan_.motion_enabled) {
      // A random consecutive target pair, drawn from a per-element stream.
      std::mt19937_64 pick_gen(detail::mix64(plan_.seed + 0x51ed270b + static_cast<std::uint64_t>(epoch_) * 977 +
                                             static_cast<std::uint64_t>(ctx.batch_index)));
      std::uniform_int_distribution<std::size_t> pick(0, target_pairs_.size() - 1);
      const std::pair<ad::Var, ad::Var> gen_pair[1] = {{a, b}};
      const Grid tgt[1] = {target_pairs_[pick(pick_gen)]};
      terms.motion = ad::mvid_loss(t, std::span<const std::pair<ad::Var, ad::Var>>(gen_pair),
                                   std::span<const Grid>(tgt), *flow_, sampling_for(ctx));
    }
    return terms;
  }

 private:
  OtSampling sampling_for(const ElementContext& ctx) const {
    OtSampling s = plan_.sampling;
    s.seed = detail::mix64(plan_.seed + static_cast<std::uint64_t>(epoch_) * 8191 +
                           static_cast<std::uint64_t>(ctx.batch_index));
    return s;
  }

  DyncaConfig cfg_;
  TrainPlan plan_;
  TargetSpec target_;
  std::shared_ptr<const FeatureExtractor> extractor_;
  std::shared_ptr<const FlowEstimator> flow_;
  UpdateRule rule_;
  CheckpointPool pool_;
  std::mt19937_64 gen_;
  ad::AdamState adam_;
  long long epoch_ = 0;
  double lambda_ = 0;
  std::optional<double> appr_initial_;
  std::vector<Grid> appearance_features_;
  std::vector<Grid> target_pairs_;
  Objective objective_;
};

/// Probe run at lambda = 5 for `probe_epochs` epochs; returns the lambda
/// mapped from the median motion loss and resets the trainer.
inline double auto_lambda(Trainer& trainer, int probe_epochs = 1000) {
  require(trainer.plan().mode != TrainMode::kVectorField, "auto_lambda: video modes only");
  require(probe_epochs >= 1, "auto_lambda: probe needs at least one epoch");
  trainer.reset();
  trainer.set_lambda(5.0);
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(probe_epochs));
  trainer.run(probe_epochs, nullptr, [&](const EpochMetrics& m) { losses.push_back(m.l_motion); });
  const auto mid = losses.begin() + static_cast<std::ptrdiff_t>(losses.size() / 2);
  std::nth_element(losses.begin(), mid, losses.end());
  double median = *mid;
  if (losses.size() % 2 == 0) median = 0.5 * (median + *std::max_element(losses.begin(), mid));
  trainer.reset();
  const double lambda = lambda_from_median(median, std::max(trainer.config().seed_h, trainer.config().seed_w));
  trainer.set_lambda(lambda);
  return lambda;
}

struct MotionReport {
  double mean_cosine = 0;  // over cells, zero vectors count as 0
  double l_norm = 0;
  double l_dir = 0;
};

/// Flow between frames `warmup` and `warmup + T` of a rollout from the seed,
/// compared against the target field.
inline MotionReport measure_motion(const DyncaConfig& cfg, const UpdateRule& rule, const Grid& target,
                                   const FlowEstimator& flow, int warmup, RngKey key = RngKey{12345}) {
  require(warmup >= 1, "measure_motion: warmup must be >= 1");
  NcaState s = make_seed<float>(cfg, target.height(), target.width());
  for (int k = 0; k < warmup; ++k) step_inplace(s, rule, cfg, key);
  const Grid a = rgb_channels(s.grid);
  for (int k = 0; k < cfg.frame_interval; ++k) step_inplace(s, rule, cfg, key);
  const Grid b = rgb_channels(s.grid);
  const Grid ug = flow.estimate(a, b);
  MotionReport r;
  double cos_sum = 0;
  for (int i = 0; i < ug.cells(); ++i) {
    const double gu = ug[2 * i], gv = ug[2 * i + 1], tu = target[2 * i], tv = target[2 * i + 1];
    const double ng = std::hypot(gu, gv), nt = std::hypot(tu, tv);
    if (ng > 0 && nt > 0) cos_sum += (gu * tu + gv * tv) / (ng * nt);
  }
  r.mean_cosine = cos_sum / ug.cells();
  const long long t1 = warmup, t2 = warmup + cfg.frame_interval;
  r.l_norm = norm_loss(ug, target, t1, t2, cfg.frame_interval);
  r.l_dir = dir_loss(ug, target);
  return r;
}

inline void save_checkpoint(const std::string& path, const DyncaConfig& cfg, const UpdateRule& rule) {
  save_weights(path, cfg, rule);
}

struct Checkpoint {
  DyncaConfig config;
  UpdateRule rule;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  WeightFile wf = load_weights(path);
  return {std::move(wf.config), std::move(wf.rule)};
}

}  // namespace dynca
