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

#include <stdexcept>
#include <string>

namespace popcal {

/// Malformed or inconsistent experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable or malformed data file.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A sampler could not start or could not continue.
struct SamplerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Run finished but its outputs are not trustworthy (e.g. most simulations failed).
struct DiagnosticError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Positive truncation could not produce a draw within the rejection cap.
struct TruncationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace popcal
