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

// dynca: train, synthesize, bench and export-field subcommands.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynca/bench.hpp"
#include "dynca/motion_fields.hpp"
#include "dynca/png_io.hpp"
#include "dynca/service.hpp"
#include "dynca/trainer.hpp"

namespace fs = std::filesystem;
using namespace dynca;

namespace {

constexpr int kExitUsage = 2;

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }

// Thrown for errors that map to a specific exit code.
struct CliExit {
  int code;
  std::string message;
};

struct Size {
  int h = 0, w = 0;
};

// "N" or "HxW".
Size parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    std::size_t used = 0;
    if (x == std::string::npos) {
      const int n = std::stoi(s, &used);
      if (used == s.size() && n > 0) return {n, n};
    } else {
      const int h = std::stoi(s.substr(0, x), &used);
      const std::string ws = s.substr(x + 1);
      std::size_t used_w = 0;
      const int w = std::stoi(ws, &used_w);
      if (used == x && used_w == ws.size() && h > 0 && w > 0) return {h, w};
    }
  } catch (const std::exception&) {
  }
  throw CliExit{kExitUsage, "bad size \"" + s + "\" (expected N or HxW)"};
}

DyncaConfig config_for(const std::string& id, int seed_size) {
  return id == "L" ? DyncaConfig::large(seed_size) : DyncaConfig::small(seed_size);
}

Grid load_rgb(const std::string& path) { return rgb_channels(from_rgb8(read_png(path))); }

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string mode = "vec";
  std::string appearance;
  std::string motion;
  std::string config = "S";
  int seed_size = 128;
  std::string out;
  std::string metrics;
  std::uint64_t seed = 0;
  double lambda = -1;
  int epochs = -1;
  bool auto_lambda = false;
  bool print_plan = false;
};

TargetSpec build_target(const TrainArgs& a, TrainMode mode, const DyncaConfig& cfg) {
  TargetSpec t;
  if (mode == TrainMode::kVectorField) {
    if (auto kind = parse_field_kind(a.motion)) {
      t.motion = generate_field(*kind, cfg.seed_h, cfg.seed_w);
    } else if (fs::is_regular_file(a.motion)) {
      std::ifstream is(a.motion, std::ios::binary);
      t.motion = read_field_raw(is, cfg.seed_h, cfg.seed_w);
    } else {
      throw CliExit{kExitUsage, "unknown motion field \"" + a.motion + "\"; valid names: " + field_name_list()};
    }
    if (a.appearance.empty()) throw CliExit{kExitUsage, "--appearance is required in vec mode"};
    t.appearance = load_rgb(a.appearance);
    return t;
  }
  const std::vector<Rgb8Image> frames = read_png_sequence(a.motion);
  if (frames.size() < 2) throw CliExit{1, "target video " + a.motion + " needs at least 2 PNG frames"};
  std::vector<Grid> video;
  for (const auto& f : frames) video.push_back(rgb_channels(from_rgb8(f)));
  if (mode == TrainMode::kStyleTransfer && a.appearance.empty())
    throw CliExit{kExitUsage, "--appearance is required in style mode"};
  t.appearance = a.appearance.empty() ? video.front() : load_rgb(a.appearance);
  t.motion = std::move(video);
  return t;
}

int run_train(const TrainArgs& a) {
  const TrainMode mode = *parse_mode(a.mode);
  DyncaConfig cfg = config_for(a.config, a.seed_size);
  cfg.frame_interval = default_frame_interval(mode);
  TrainPlan plan = TrainPlan::defaults(mode, a.seed_size);
  plan.seed = a.seed;
  if (a.epochs > 0) plan.epochs = a.epochs;
  if (a.lambda >= 0) plan.lambda = a.lambda;

  nlohmann::json summary{{"mode", mode_name(mode)}, {"config", a.config},       {"seed_size", a.seed_size},
                         {"T", cfg.frame_interval}, {"gamma", plan.gamma},      {"c", plan.overflow_weight},
                         {"lambda", plan.lambda},   {"batch", plan.batch},      {"epochs", plan.epochs},
                         {"lr", plan.lr},           {"min_steps", plan.min_steps}, {"max_steps", plan.max_steps},
                         {"parameters", parameter_count(cfg)}};
  TargetSpec target = build_target(a, mode, cfg);
  if (a.print_plan) {
    std::cout << summary.dump() << "\n";
    return 0;
  }
  if (a.out.empty()) throw CliExit{kExitUsage, "--out is required"};
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.jsonl" : a.metrics;
  std::ofstream metrics(metrics_path);
  if (!metrics) throw CliExit{1, "cannot open " + metrics_path + " for writing"};

  Trainer trainer(cfg, plan, std::move(target));
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  if (a.auto_lambda && a.lambda < 0) summary["lambda"] = auto_lambda(trainer);
  std::cerr << summary.dump() << "\n";
  trainer.run(plan.epochs, &metrics, [&](const EpochMetrics& m) {
    if (m.epoch % 100 == 0 || m.epoch + 1 == plan.epochs)
      std::cerr << "epoch " << m.epoch << " L_appr=" << m.l_appr << " L_motion=" << m.l_motion << "\n";
  }, &g_stop);
  save_checkpoint(a.out, trainer.config(), trainer.rule());
  return 0;
}

// --- synthesize -------------------------------------------------------------

struct SynthArgs {
  std::string weights;
  int frames = 10;
  std::string size = "128x128";
  std::string out;
  std::string serve;
  std::uint64_t seed = 0;
  int max_connections = -1;
  double max_fps = 0;
};

int run_synthesize(const SynthArgs& a) {
  const Size size = parse_size(a.size);
  Checkpoint ck = load_checkpoint(a.weights);
  if (!a.serve.empty()) {
    ServeOptions opts;
    const auto colon = a.serve.rfind(':');
    if (colon == std::string::npos) throw CliExit{kExitUsage, "--serve expects HOST:PORT"};
    opts.host = a.serve.substr(0, colon);
    opts.port = std::stoi(a.serve.substr(colon + 1));
    opts.max_fps = a.max_fps;
    // Validate the size once before accepting clients.
    Session probe(ck.config, ck.rule, size.h, size.w, RngKey{a.seed});
    FrameServer server(
        [&] { return std::make_unique<Session>(ck.config, ck.rule, size.h, size.w, RngKey{a.seed}); }, opts);
    std::cout << "listening on " << opts.host << ":" << server.port() << std::endl;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    server.serve(g_stop, a.max_connections);
    return 0;
  }
  if (a.out.empty()) throw CliExit{kExitUsage, "one of --out or --serve is required"};
  if (a.frames < 1) throw CliExit{kExitUsage, "--frames must be >= 1"};
  fs::create_directories(a.out);
  Session session(ck.config, ck.rule, size.h, size.w, RngKey{a.seed});
  for (int k = 0; k < a.frames; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05d.png", k);
    write_png((fs::path(a.out) / name).string(), session.advance_frame());
  }
  return 0;
}

// --- bench / export-field -----------------------------------------------------

struct BenchArgs {
  std::string config = "S";
  std::string size = "128";
  int t = 24;
  int threads = 0;
  int steps = 500;
};

int run_bench_cmd(const BenchArgs& a) {
  const Size size = parse_size(a.size);
  set_thread_count(a.threads);
  DyncaConfig cfg = config_for(a.config, std::max(size.h, size.w));
  BenchOptions opt;
  opt.height = size.h;
  opt.width = size.w;
  opt.frame_interval = a.t;
  opt.timed_steps = a.steps;
  const BenchReport r = run_bench(cfg, bench_rule(cfg), opt);
  std::cout << r.to_json().dump() << "\n";
  r.print_table(std::cout);
  return 0;
}

struct ExportArgs {
  std::string field;
  std::string size = "128";
  std::string png;
  std::string raw;
};

int run_export(const ExportArgs& a) {
  const auto kind = parse_field_kind(a.field);
  if (!kind) throw CliExit{kExitUsage, "unknown motion field \"" + a.field + "\"; valid names: " + field_name_list()};
  if (a.png.empty() && a.raw.empty()) throw CliExit{kExitUsage, "give --png and/or --raw"};
  const Size size = parse_size(a.size);
  const Grid f = generate_field(*kind, size.h, size.w);
  if (!a.png.empty()) write_png(a.png, colorize_flow(f));
  if (!a.raw.empty()) {
    std::ofstream os(a.raw, std::ios::binary);
    if (!os) throw CliExit{1, "cannot open " + a.raw + " for writing"};
    write_field_raw(os, f);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DyNCA dynamic texture engine"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train an update rule");
  train->add_option("--mode", ta.mode, "vec, video or style")->check(CLI::IsMember({"vec", "video", "style"}));
  train->add_option("--appearance", ta.appearance, "Appearance target PNG");
  train->add_option("--motion", ta.motion, "Field name, raw field file, or PNG frame directory")->required();
  train->add_option("--config", ta.config, "Model size")->check(CLI::IsMember({"S", "L"}));
  train->add_option("--seed-size", ta.seed_size, "Seed grid size")->check(CLI::IsMember({128, 256}));
  train->add_option("--out", ta.out, "Checkpoint path");
  train->add_option("--metrics", ta.metrics, "Metrics log (default: OUT.metrics.jsonl)");
  train->add_option("--seed", ta.seed, "RNG seed");
  train->add_option("--lambda", ta.lambda, "Motion loss weight")->check(CLI::NonNegativeNumber);
  train->add_option("--epochs", ta.epochs, "Epoch count")->check(CLI::PositiveNumber);
  train->add_flag("--auto-lambda", ta.auto_lambda, "Pick lambda from a probe run");
  train->add_flag("--print-plan", ta.print_plan, "Print the resolved settings and exit");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synthesize", "Run a trained rule");
  synth->add_option("--weights", sa.weights, "DYNC checkpoint")->required();
  synth->add_option("--frames", sa.frames, "Frames to write");
  synth->add_option("--size", sa.size, "HxW");
  synth->add_option("--seed", sa.seed, "Mask RNG seed");
  auto* out_opt = synth->add_option("--out", sa.out, "Output directory");
  auto* serve_opt = synth->add_option("--serve", sa.serve, "Stream on HOST:PORT");
  out_opt->excludes(serve_opt);
  synth->add_option("--max-connections", sa.max_connections, "Exit after this many clients");
  synth->add_option("--max-fps", sa.max_fps, "Frame rate cap (0: none)");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Measure steps per second");
  bench->add_option("--config", ba.config)->check(CLI::IsMember({"S", "L"}));
  bench->add_option("--size", ba.size, "N or HxW");
  bench->add_option("--T", ba.t, "Steps per frame")->check(CLI::PositiveNumber);
  bench->add_option("--threads", ba.threads, "Worker threads (0: all cores)");
  bench->add_option("--steps", ba.steps, "Timed steps")->check(CLI::PositiveNumber);

  ExportArgs ea;
  auto* exp = app.add_subcommand("export-field", "Write a motion field as PNG and/or raw f32");
  exp->add_option("--field", ea.field)->required();
  exp->add_option("--size", ea.size, "N or HxW");
  exp->add_option("--png", ea.png);
  exp->add_option("--raw", ea.raw);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return run_train(ta);
    if (*synth) return run_synthesize(sa);
    if (*bench) return run_bench_cmd(ba);
    return run_export(ea);
  } catch (const CliExit& e) {
    std::cerr << "dynca: " << e.message << "\n";
    return e.code;
  } catch (const WeightFormatError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "dynca: " << e.what() << "\n";
    return 1;
  }
}
