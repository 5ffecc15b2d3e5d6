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

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dynca {

/// Base class for every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or dimensions that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Arguments outside their documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ArgumentError(message);
}

inline void require_shape(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

namespace detail {
inline std::atomic<int>& thread_count_slot() {
  static std::atomic<int> count{1};
  return count;
}
}  // namespace detail

/// Number of worker threads used by row-parallel kernels. Defaults to 1.
inline int thread_count() { return detail::thread_count_slot().load(); }

/// Sets the worker count; 0 selects std::thread::hardware_concurrency().
inline void set_thread_count(int n) {
  if (n <= 0) n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  detail::thread_count_slot().store(n);
}

/// Runs fn(i) for every i in [0, n). Work items are independent, so results
/// never depend on how items are spread over threads.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
}

}  // namespace dynca
