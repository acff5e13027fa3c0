/*
 * Copyright (C) 2026 The popcal authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace popcal {

/// Random stream used everywhere a draw is made. Always passed explicitly.
using Stream = std::mt19937_64;

/// Purpose tags that keep substreams of different consumers disjoint.
enum class StreamTag : std::uint64_t {
  chain = 1,
  replicate = 2,
  particle_init = 3,
  particle_move = 4,
  resample = 5,
  calibration = 6,
  pilot = 7,
  predictive = 8,
  synthetic_data = 9,
  reference_fit = 10,
  misc = 11,
};

/// Deterministic substream derived from a run seed and an index path.
///
/// Every unit of parallel work (a replicate inside a BSL iteration, a particle
/// move inside an SMC round, ...) draws from its own substream keyed by its
/// position in the algorithm, so results never depend on scheduling.
inline Stream substream(std::uint64_t seed, StreamTag tag, std::initializer_list<std::uint64_t> path = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(4 + 2 * path.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  push(static_cast<std::uint64_t>(tag));
  for (auto p : path) push(p);
  std::seed_seq seq(words.begin(), words.end());
  return Stream(seq);
}

inline double uniform01(Stream& stream) { return std::uniform_real_distribution<double>(0.0, 1.0)(stream); }

}  // namespace popcal
