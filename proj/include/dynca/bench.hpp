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


// Throughput harness: warm up, then time a fixed number of steps.

#pragma once

#include <chrono>
#include <cstdio>
#include <ostream>
#include <random>
#include <string>

#include <json.hpp>

#include "dynca/model.hpp"

namespace dynca {

inline std::string config_id(const DyncaConfig& cfg) {
  if (cfg.channels == 12 && cfg.hidden == 96) return "S";
  if (cfg.channels == 16 && cfg.hidden == 128) return "L";
  return "custom";
}

struct BenchReport {
  std::string config;
  int seed_size = 0;
  int height = 0;
  int width = 0;
  int frame_interval = 0;
  int warmup_steps = 0;
  int timed_steps = 0;
  int threads = 0;
  double seconds = 0;
  double steps_per_sec = 0;
  double fps = 0;
  double ms_per_step = 0;

  nlohmann::json to_json() const {
    return {{"config", config},       {"seed_size", seed_size},   {"height", height},
            {"width", width},         {"T", frame_interval},      {"warmup_steps", warmup_steps},
            {"timed_steps", timed_steps}, {"threads", threads},   {"seconds", seconds},
            {"steps_per_sec", steps_per_sec}, {"fps", fps},        {"ms_per_step", ms_per_step}};
  }

  void print_table(std::ostream& os) const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-8s %-10s %-4s %-8s %12s %10s %10s\n", "config", "size", "T", "threads",
                  "steps/s", "FPS", "ms/step");
    os << buf;
    const std::string size = std::to_string(height) + "x" + std::to_string(width);
    std::snprintf(buf, sizeof buf, "%-8s %-10s %-4d %-8d %12.1f %10.2f %10.3f\n", config.c_str(), size.c_str(),
                  frame_interval, threads, steps_per_sec, fps, ms_per_step);
    os << buf;
  }
};

struct BenchOptions {
  int height = 128;
  int width = 128;
  int frame_interval = 0;  // cfg.frame_interval when 0
  int warmup_steps = 50;
  int timed_steps = 500;
  RngKey key{1};
};

/// A rule with a random nonzero second layer, so the timed steps do real work.
inline UpdateRule bench_rule(const DyncaConfig& cfg, std::uint64_t seed = 1) {
  UpdateRule r = UpdateRule::initialized(cfg, seed);
  std::mt19937_64 gen(seed ^ 0x5eed);
  std::normal_distribution<float> n(0.0f, 0.05f);
  for (auto& v : r.w2) v = n(gen);
  return r;
}

inline BenchReport run_bench(const DyncaConfig& cfg, const UpdateRule& rule, const BenchOptions& opt = {}) {
  require(opt.timed_steps >= 1 && opt.warmup_steps >= 0, "bench: step counts must be positive");
  const int t = opt.frame_interval > 0 ? opt.frame_interval : cfg.frame_interval;
  require(t >= 1, "bench: T must be >= 1");
  NcaState s = make_seed<float>(cfg, opt.height, opt.width);
  for (int k = 0; k < opt.warmup_steps; ++k) step_inplace(s, rule, cfg, opt.key);
  const auto t0 = std::chrono::steady_clock::now();
  for (int k = 0; k < opt.timed_steps; ++k) step_inplace(s, rule, cfg, opt.key);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  BenchReport r;
  r.config = config_id(cfg);
  r.seed_size = cfg.seed_h;
  r.height = opt.height;
  r.width = opt.width;
  r.frame_interval = t;
  r.warmup_steps = opt.warmup_steps;
  r.timed_steps = opt.timed_steps;
  r.threads = thread_count();
  r.seconds = sec;
  r.steps_per_sec = opt.timed_steps / sec;
  r.fps = r.steps_per_sec / t;
  r.ms_per_step = 1000.0 * sec / opt.timed_steps;
  return r;
}

}  // namespace dynca
