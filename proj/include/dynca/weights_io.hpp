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

// "DYNC" weight container.
//
//   magic    "DYNC"
//   version  u16 (= 1)
//   C u32, FC u32, scale count u32, scales u32[count],
//   padding u8, use_cpe u8, T u32, update_rate f32
//   w1 f32[in * FC], b1 f32[FC], w2 f32[FC * C]
//   zero or more sections: tag[4], byte length u32, payload
//
// All integers and floats are little-endian. The only section defined so
// far is "FXW1", an external feature-bank for the appearance extractor:
//   levels u32, then per level: in u32, out u32,
//   weights f32[out * in * 9], bias f32[out]

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dynca/model.hpp"

namespace dynca {

class WeightFormatError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kBadVersion, kTruncated, kInvalid };
  WeightFormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::array<char, 4> kWeightMagic{'D', 'Y', 'N', 'C'};
inline constexpr std::uint16_t kWeightVersion = 1;

/// One fixed 3x3 filter bank level: weights [out][in][9], bias [out].
struct FeatureBankLevel {
  int in_channels = 0;
  int out_channels = 0;
  std::vector<float> weights;
  std::vector<float> bias;
  friend bool operator==(const FeatureBankLevel&, const FeatureBankLevel&) = default;
};

struct FeatureBank {
  std::vector<FeatureBankLevel> levels;
  friend bool operator==(const FeatureBank&, const FeatureBank&) = default;
};

struct WeightFile {
  DyncaConfig config;
  UpdateRule rule;
  std::optional<FeatureBank> feature_bank;
};

namespace detail {

class LeWriter {
 public:
  explicit LeWriter(std::ostream& os) : os_(os) {}
  void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <class U>
  void integer(U v) {
    std::array<unsigned char, sizeof(U)> b{};
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    bytes(b.data(), b.size());
  }
  void f32(float v) { integer(std::bit_cast<std::uint32_t>(v)); }
  void f32s(const std::vector<float>& v) {
    for (float x : v) f32(x);
  }

 private:
  std::ostream& os_;
};

class LeReader {
 public:
  explicit LeReader(std::istream& is) : is_(is) {}
  void bytes(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw WeightFormatError(WeightFormatError::Kind::kTruncated, "weight file truncated");
  }
  template <class U>
  U integer() {
    std::array<unsigned char, sizeof(U)> b{};
    bytes(b.data(), b.size());
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return static_cast<U>(v);
  }
  float f32() { return std::bit_cast<float>(integer<std::uint32_t>()); }
  std::vector<float> f32s(std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
};

inline void invalid_if(bool bad, const std::string& what) {
  if (bad) throw WeightFormatError(WeightFormatError::Kind::kInvalid, what);
}

inline std::string encode_feature_bank(const FeatureBank& bank) {
  std::ostringstream os;
  LeWriter w(os);
  w.integer(static_cast<std::uint32_t>(bank.levels.size()));
  for (const auto& level : bank.levels) {
    w.integer(static_cast<std::uint32_t>(level.in_channels));
    w.integer(static_cast<std::uint32_t>(level.out_channels));
    w.f32s(level.weights);
    w.f32s(level.bias);
  }
  return os.str();
}

inline FeatureBank decode_feature_bank(const std::string& payload) {
  std::istringstream is(payload);
  LeReader r(is);
  FeatureBank bank;
  const auto levels = r.integer<std::uint32_t>();
  invalid_if(levels == 0 || levels > 64, "FXW1: implausible level count");
  for (std::uint32_t l = 0; l < levels; ++l) {
    FeatureBankLevel level;
    level.in_channels = static_cast<int>(r.integer<std::uint32_t>());
    level.out_channels = static_cast<int>(r.integer<std::uint32_t>());
    invalid_if(level.in_channels < 1 || level.in_channels > 4096 || level.out_channels < 1 ||
                   level.out_channels > 4096,
               "FXW1: implausible channel counts");
    level.weights = r.f32s(static_cast<std::size_t>(level.out_channels) * level.in_channels * 9);
    level.bias = r.f32s(static_cast<std::size_t>(level.out_channels));
    bank.levels.push_back(std::move(level));
  }
  return bank;
}

}  // namespace detail

inline void write_weights(std::ostream& os, const DyncaConfig& cfg, const UpdateRule& rule,
                          const FeatureBank* bank = nullptr) {
  require_shape(rule.matches(cfg), "write_weights: rule does not match config");
  detail::LeWriter w(os);
  w.bytes(kWeightMagic.data(), kWeightMagic.size());
  w.integer(kWeightVersion);
  w.integer(static_cast<std::uint32_t>(cfg.channels));
  w.integer(static_cast<std::uint32_t>(cfg.hidden));
  w.integer(static_cast<std::uint32_t>(cfg.scales.size()));
  for (int s : cfg.scales) w.integer(static_cast<std::uint32_t>(s));
  w.integer(static_cast<std::uint8_t>(cfg.padding));
  w.integer(static_cast<std::uint8_t>(cfg.use_cpe ? 1 : 0));
  w.integer(static_cast<std::uint32_t>(cfg.frame_interval));
  w.f32(cfg.update_rate);
  w.f32s(rule.w1);
  w.f32s(rule.b1);
  w.f32s(rule.w2);
  if (bank) {
    const std::string payload = detail::encode_feature_bank(*bank);
    w.bytes("FXW1", 4);
    w.integer(static_cast<std::uint32_t>(payload.size()));
    w.bytes(payload.data(), payload.size());
  }
  if (!os) throw WeightFormatError(WeightFormatError::Kind::kIo, "failed writing weights");
}

inline WeightFile read_weights(std::istream& is) {
  detail::LeReader r(is);
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kWeightMagic)
    throw WeightFormatError(WeightFormatError::Kind::kBadMagic, "not a DYNC weight file (bad magic)");
  const auto version = r.integer<std::uint16_t>();
  if (version != kWeightVersion)
    throw WeightFormatError(WeightFormatError::Kind::kBadVersion,
                            "unsupported DYNC version " + std::to_string(version));
  WeightFile out;
  DyncaConfig& cfg = out.config;
  cfg.channels = static_cast<int>(r.integer<std::uint32_t>());
  cfg.hidden = static_cast<int>(r.integer<std::uint32_t>());
  const auto n_scales = r.integer<std::uint32_t>();
  detail::invalid_if(n_scales == 0 || n_scales > 16, "implausible pyramid scale count");
  cfg.scales.clear();
  for (std::uint32_t i = 0; i < n_scales; ++i)
    cfg.scales.push_back(static_cast<int>(r.integer<std::uint32_t>()));
  const auto pad = r.integer<std::uint8_t>();
  detail::invalid_if(pad > 2, "unknown padding mode");
  cfg.padding = static_cast<PaddingMode>(pad);
  cfg.use_cpe = r.integer<std::uint8_t>() != 0;
  cfg.frame_interval = static_cast<int>(r.integer<std::uint32_t>());
  cfg.update_rate = r.f32();
  detail::invalid_if(cfg.channels < 4 || cfg.channels > 4096 || cfg.hidden < 1 || cfg.hidden > 65536,
                     "implausible model dimensions");
  try {
    cfg.validate();
  } catch (const ArgumentError& e) {
    throw WeightFormatError(WeightFormatError::Kind::kInvalid, e.what());
  }
  out.rule = UpdateRule(cfg);
  out.rule.w1 = r.f32s(out.rule.w1.size());
  out.rule.b1 = r.f32s(out.rule.b1.size());
  out.rule.w2 = r.f32s(out.rule.w2.size());
  while (!r.at_end()) {
    std::array<char, 4> tag{};
    r.bytes(tag.data(), tag.size());
    const auto len = r.integer<std::uint32_t>();
    std::string payload(len, '\0');
    r.bytes(payload.data(), len);
    if (std::memcmp(tag.data(), "FXW1", 4) == 0) out.feature_bank = detail::decode_feature_bank(payload);
  }
  return out;
}

inline void save_weights(const std::string& path, const DyncaConfig& cfg, const UpdateRule& rule,
                         const FeatureBank* bank = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw WeightFormatError(WeightFormatError::Kind::kIo, "cannot open " + path + " for writing");
  write_weights(os, cfg, rule, bank);
}

inline WeightFile load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw WeightFormatError(WeightFormatError::Kind::kIo, "cannot open " + path);
  return read_weights(is);
}

}  // namespace dynca
