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

#pragma once

#include <cstdint>

namespace dynca {

/// Counter-based key for the stochastic update mask. A mask bit is a pure
/// function of (seed, step, row, col), so evaluation order never matters.
struct RngKey {
  std::uint64_t seed = 0;
};

namespace detail {
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

constexpr std::uint64_t hash_cell(RngKey key, std::uint64_t step, std::uint32_t row,
                                  std::uint32_t col) {
  std::uint64_t h = detail::mix64(key.seed + 0x9e3779b97f4a7c15ULL);
  h = detail::mix64(h ^ (step * 0xd1b54a32d192ed03ULL));
  h = detail::mix64(h ^ ((static_cast<std::uint64_t>(row) << 32) | col));
  return h;
}

/// Uniform draw in [0, 1) with 24 bits of resolution.
constexpr float uniform_cell(RngKey key, std::uint64_t step, std::uint32_t row,
                             std::uint32_t col) {
  return static_cast<float>(hash_cell(key, step, row, col) >> 40) * 0x1.0p-24f;
}

/// Bernoulli(rate) mask bit for one cell at one step.
constexpr bool mask_bit(RngKey key, std::uint64_t step, std::uint32_t row, std::uint32_t col,
                        float rate) {
  return rate >= 1.0f || uniform_cell(key, step, row, col) < rate;
}

}  // namespace dynca
