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


// Streaming session protocol. Server to client: binary frames (0x01, u16 w,
// u16 h, RGB8) and replies (0x02, u32 length, JSON). Client to server:
// newline-delimited JSON commands. All integers are little-endian.

#pragma once

#include <array>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <json.hpp>

#include "dynca/controls.hpp"
#include "dynca/weights_io.hpp"

namespace dynca {

inline constexpr std::uint8_t kFrameTag = 0x01;
inline constexpr std::uint8_t kReplyTag = 0x02;

class ProtocolError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline std::uint32_t get_le(const std::string& s, std::size_t at, int bytes) {
  std::uint32_t v = 0;
  for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + b])) << (8 * b);
  return v;
}
}  // namespace detail

inline std::string encode_frame(const Rgb8Image& img) {
  require(img.width >= 1 && img.width <= 0xffff && img.height >= 1 && img.height <= 0xffff,
          "frame: dimensions must fit in u16");
  std::string out;
  out.reserve(5 + img.pixels.size());
  out.push_back(static_cast<char>(kFrameTag));
  detail::put_u16(out, static_cast<std::uint16_t>(img.width));
  detail::put_u16(out, static_cast<std::uint16_t>(img.height));
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline std::string encode_reply(const nlohmann::json& j) {
  const std::string body = j.dump();
  std::string out;
  out.push_back(static_cast<char>(kReplyTag));
  detail::put_u32(out, static_cast<std::uint32_t>(body.size()));
  out += body;
  return out;
}

using ServerMessage = std::variant<Rgb8Image, nlohmann::json>;

/// Incremental decoder for the server-to-client stream.
class MessageDecoder {
 public:
  void feed(const char* data, std::size_t n) { buf_.append(data, n); }

  /// Next complete message, if buffered.
  std::optional<ServerMessage> next() {
    if (buf_.empty()) return std::nullopt;
    const auto tag = static_cast<std::uint8_t>(buf_[0]);
    if (tag == kFrameTag) {
      if (buf_.size() < 5) return std::nullopt;
      const int w = static_cast<int>(detail::get_le(buf_, 1, 2));
      const int h = static_cast<int>(detail::get_le(buf_, 3, 2));
      const std::size_t len = static_cast<std::size_t>(w) * h * 3;
      if (buf_.size() < 5 + len) return std::nullopt;
      Rgb8Image img(w, h);
      std::memcpy(img.pixels.data(), buf_.data() + 5, len);
      buf_.erase(0, 5 + len);
      return img;
    }
    if (tag == kReplyTag) {
      if (buf_.size() < 5) return std::nullopt;
      const std::size_t len = detail::get_le(buf_, 1, 4);
      if (buf_.size() < 5 + len) return std::nullopt;
      nlohmann::json j = nlohmann::json::parse(buf_.substr(5, len));
      buf_.erase(0, 5 + len);
      return j;
    }
    throw ProtocolError("unknown message tag " + std::to_string(tag));
  }

 private:
  std::string buf_;
};

inline constexpr std::array<std::string_view, 6> kCommandNames{"set_direction", "set_speed", "brush",
                                                                "set_transform", "resize",   "load_weights"};

/// One synthesis session: state, controls and mask stream. Commands apply
/// at step boundaries only.
class Session {
 public:
  Session(DyncaConfig cfg, UpdateRule rule, int h, int w, RngKey key = RngKey{0})
      : Session(cfg, std::move(rule), make_seed<float>(cfg, h, w), key) {}

  Session(DyncaConfig cfg, UpdateRule rule, NcaState initial, RngKey key = RngKey{0})
      : cfg_(std::move(cfg)), rule_(std::move(rule)), state_(std::move(initial)), key_(key),
        controls_(cfg_.frame_interval) {
    require_shape(rule_.matches(cfg_), "session: update rule does not match config");
    require_shape(state_.grid.channels() == cfg_.channels, "session: state channels do not match config");
  }

  const DyncaConfig& config() const { return cfg_; }
  const UpdateRule& rule() const { return rule_; }
  const NcaState& state() const { return state_; }
  const ControlState& controls() const { return controls_; }
  std::uint64_t step_index() const { return state_.step_count; }

  /// Parses and applies one command at the current step boundary. Returns
  /// exactly one reply; on error the session is unchanged.
  nlohmann::json apply(const std::string& line) {
    nlohmann::json reply{{"step", state_.step_count}};
    try {
      const nlohmann::json cmd = nlohmann::json::parse(line);
      if (!cmd.is_object() || !cmd.contains("cmd") || !cmd["cmd"].is_string())
        throw ProtocolError("command must be an object with a string \"cmd\"");
      const std::string name = cmd["cmd"].get<std::string>();
      reply["cmd"] = name;
      dispatch(name, cmd);
      reply["ok"] = true;
    } catch (const std::exception& e) {
      reply["ok"] = false;
      reply["error"] = e.what();
    }
    return reply;
  }

  /// Advances one frame (T live steps) and renders it.
  Rgb8Image advance_frame() {
    const Steering steer = controls_.steering();
    for (int k = 0; k < controls_.frame_interval(); ++k) step_inplace(state_, rule_, cfg_, key_, steer);
    return to_rgb8(state_.grid);
  }

 private:
  static double number(const nlohmann::json& cmd, const char* key) {
    if (!cmd.contains(key) || !cmd[key].is_number()) throw ProtocolError(std::string("missing number \"") + key + "\"");
    return cmd[key].get<double>();
  }
  static long long integer(const nlohmann::json& cmd, const char* key) {
    if (!cmd.contains(key) || !cmd[key].is_number_integer())
      throw ProtocolError(std::string("missing integer \"") + key + "\"");
    return cmd[key].get<long long>();
  }

  // Every branch validates fully before mutating anything.
  void dispatch(const std::string& name, const nlohmann::json& cmd) {
    const int h = state_.grid.height(), w = state_.grid.width();
    if (name == "set_direction") {
      controls_.set_direction(number(cmd, "theta"));
    } else if (name == "set_speed") {
      const long long t = integer(cmd, "T");
      require(t >= 1 && t <= 1 << 20, "speed: T must be in [1, 2^20]");
      controls_.set_speed(static_cast<int>(t));
    } else if (name == "brush") {
      const double row = number(cmd, "row"), col = number(cmd, "col"), radius = number(cmd, "radius");
      require(std::isfinite(row) && std::isfinite(col), "brush: center must be finite");
      require(radius > 0 && std::isfinite(radius), "brush: radius must be positive");
      brush_erase(state_, row, col, radius);
    } else if (name == "set_transform") {
      if (!cmd.contains("kind") || !cmd["kind"].is_string()) throw ProtocolError("missing string \"kind\"");
      const std::string kind = cmd["kind"].get<std::string>();
      if (kind == transform_name(LocalTransform::kNone)) {
        controls_.set_local_transform(LocalTransform::kNone, h, w);
      } else if (kind == transform_name(LocalTransform::kCircularFromRight)) {
        controls_.set_local_transform(LocalTransform::kCircularFromRight, h, w);
      } else if (kind == transform_name(LocalTransform::kUserMap)) {
        if (!cmd.contains("map") || !cmd["map"].is_array()) throw ProtocolError("user_map needs an array \"map\"");
        std::vector<float> values;
        for (const auto& v : cmd["map"]) {
          if (!v.is_number()) throw ProtocolError("map entries must be numbers");
          values.push_back(v.get<float>());
        }
        require_shape(values.size() == static_cast<std::size_t>(h) * w,
                      "transform: map has " + std::to_string(values.size()) + " values, state has " +
                          std::to_string(h * w) + " cells");
        const Grid map(h, w, 1, std::move(values));
        controls_.set_local_transform(LocalTransform::kUserMap, h, w, &map);
      } else {
        throw ProtocolError("unknown transform kind \"" + kind + "\"");
      }
    } else if (name == "resize") {
      const long long nh = integer(cmd, "height"), nw = integer(cmd, "width");
      require(nh >= 1 && nw >= 1 && nh <= 4096 && nw <= 4096, "resize: size must be in [1, 4096]");
      NcaState fresh = resize_state(cfg_, static_cast<int>(nh), static_cast<int>(nw));
      fresh.step_count = state_.step_count;
      state_ = std::move(fresh);
      controls_.on_resize(static_cast<int>(nh), static_cast<int>(nw));
    } else if (name == "load_weights") {
      if (!cmd.contains("path") || !cmd["path"].is_string()) throw ProtocolError("missing string \"path\"");
      WeightFile wf = load_weights(cmd["path"].get<std::string>());
      check_seed_size(wf.config, h, w);
      NcaState fresh = make_seed<float>(wf.config, h, w);
      fresh.step_count = state_.step_count;
      cfg_ = std::move(wf.config);
      rule_ = std::move(wf.rule);
      state_ = std::move(fresh);
    } else {
      std::string names;
      for (auto n : kCommandNames) names += (names.empty() ? "" : ", ") + std::string(n);
      throw ProtocolError("unknown command \"" + name + "\" (expected one of: " + names + ")");
    }
  }

  DyncaConfig cfg_;
  UpdateRule rule_;
  NcaState state_;
  RngKey key_;
  ControlState controls_;
};

// ---------------------------------------------------------------------------
// Socket plumbing

namespace detail {
inline bool send_all(int fd, const std::string& bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    off += static_cast<std::size_t>(n);
  }
  return true;
}
}  // namespace detail

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 0;         // 0 picks an ephemeral port
  double max_fps = 0;   // 0 runs unthrottled
  long long max_frames = -1;  // per connection; negative runs until disconnect
};

/// One connection: a reader feeding the command queue, the synthesis loop,
/// and a sender that never drops replies but keeps only the latest frame.
class Connection {
 public:
  Connection(int fd, std::unique_ptr<Session> session, const ServeOptions& opts)
      : fd_(fd), session_(std::move(session)), opts_(opts) {}

  void run(const std::atomic<bool>& stop) {
    std::thread reader([this] { read_loop(); });
    std::thread sender([this] { send_loop(); });
    long long frames = 0;
    auto next_due = std::chrono::steady_clock::now();
    while (!stop && !closed_ && (opts_.max_frames < 0 || frames < opts_.max_frames)) {
      std::deque<std::string> pending;
      {
        std::lock_guard lock(mu_);
        pending.swap(commands_);
      }
      std::vector<std::string> replies;
      for (const std::string& line : pending) replies.push_back(encode_reply(session_->apply(line)));
      const Rgb8Image frame = session_->advance_frame();
      {
        std::lock_guard lock(mu_);
        for (auto& r : replies) outbox_.push_back(std::move(r));
        latest_frame_ = encode_frame(frame);
      }
      cv_.notify_all();
      ++frames;
      if (opts_.max_fps > 0) {
        next_due += std::chrono::microseconds(static_cast<long long>(1e6 / opts_.max_fps));
        std::this_thread::sleep_until(next_due);
      }
    }
    {
      std::lock_guard lock(mu_);
      done_ = true;
    }
    cv_.notify_all();
    sender.join();
    ::shutdown(fd_, SHUT_RDWR);
    reader.join();
    ::close(fd_);
  }

 private:
  void read_loop() {
    std::string buf;
    char chunk[4096];
    for (;;) {
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      buf.append(chunk, static_cast<std::size_t>(n));
      std::size_t pos;
      while ((pos = buf.find('\n')) != std::string::npos) {
        std::string line = buf.substr(0, pos);
        buf.erase(0, pos + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::lock_guard lock(mu_);
        commands_.push_back(std::move(line));
      }
    }
    closed_ = true;
  }

  void send_loop() {
    for (;;) {
      std::deque<std::string> replies;
      std::string frame;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return done_ || !outbox_.empty() || !latest_frame_.empty(); });
        replies.swap(outbox_);
        frame.swap(latest_frame_);
        if (replies.empty() && frame.empty() && done_) return;
      }
      for (const auto& r : replies)
        if (!detail::send_all(fd_, r)) return fail();
      if (!frame.empty() && !detail::send_all(fd_, frame)) return fail();
    }
  }

  void fail() { closed_ = true; }

  int fd_;
  std::unique_ptr<Session> session_;
  ServeOptions opts_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> commands_;
  std::deque<std::string> outbox_;
  std::string latest_frame_;
  bool done_ = false;
  std::atomic<bool> closed_{false};
};

/// TCP server: one session per connection, connections served in turn.
class FrameServer {
 public:
  using SessionFactory = std::function<std::unique_ptr<Session>()>;

  FrameServer(SessionFactory factory, ServeOptions opts) : factory_(std::move(factory)), opts_(std::move(opts)) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(opts_.port));
    if (::inet_pton(AF_INET, opts_.host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw ArgumentError("serve: invalid IPv4 address \"" + opts_.host + "\"");
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 4) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw Error("serve: cannot listen on " + opts_.host + ":" + std::to_string(opts_.port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;
  ~FrameServer() {
    if (fd_ >= 0) ::close(fd_);
  }

  int port() const { return port_; }

  /// Accepts until `stop` is set or `max_connections` have been served.
  void serve(const std::atomic<bool>& stop, int max_connections = -1) {
    int served = 0;
    while (!stop && (max_connections < 0 || served < max_connections)) {
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, 100) <= 0) continue;
      const int client = ::accept(fd_, nullptr, nullptr);
      if (client < 0) continue;
      const int one = 1;
      ::setsockopt(client, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      Connection conn(client, factory_(), opts_);
      conn.run(stop);
      ++served;
    }
  }

 private:
  SessionFactory factory_;
  ServeOptions opts_;
  int fd_ = -1;
  int port_ = 0;
};

/// Blocking client used by tests and tools.
class FrameClient {
 public:
  FrameClient(const std::string& host, int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
    if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      if (fd_ >= 0) ::close(fd_);
      throw Error("client: cannot connect to " + host + ":" + std::to_string(port));
    }
  }
  FrameClient(const FrameClient&) = delete;
  FrameClient& operator=(const FrameClient&) = delete;
  ~FrameClient() { ::close(fd_); }

  void send_line(const std::string& line) {
    if (!detail::send_all(fd_, line + "\n")) throw Error("client: send failed");
  }

  /// Blocks for the next message; nullopt when the server closed.
  std::optional<ServerMessage> receive() {
    for (;;) {
      if (auto m = decoder_.next()) return m;
      char chunk[65536];
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return std::nullopt;
      decoder_.feed(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_ = -1;
  MessageDecoder decoder_;
};

}  // namespace dynca
