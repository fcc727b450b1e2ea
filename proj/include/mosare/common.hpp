// Copyright 2026 The MoSARe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mosare {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace detail {

inline void cat_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void cat_into(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  cat_into(os, rest...);
}

}  // namespace detail

/// Builds a message string from heterogeneous pieces.
template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::cat_into(os, args...);
  return os.str();
}

/// Base error. `user_error()` distinguishes bad input/config (CLI exit 1)
/// from runtime failures (CLI exit 2).
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg, bool user)
      : std::runtime_error(msg), kind_(std::move(kind)), user_(user) {}
  const std::string& kind() const { return kind_; }
  bool user_error() const { return user_; }

 private:
  std::string kind_;
  bool user_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m, true) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("parse", m, true) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m, true) {}
};
struct MaskingError : Error {
  explicit MaskingError(const std::string& m) : Error("masking", m, true) {}
};
struct StratificationError : Error {
  explicit StratificationError(const std::string& m) : Error("stratification", m, true) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& m) : Error("value", m, true) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& m) : Error("numerical", m, false) {}
};
struct StateError : Error {
  explicit StateError(const std::string& m) : Error("state", m, false) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m, false) {}
};

/// FNV-1a, used for config hashes and derived RNG streams. Stable across
/// platforms, unlike std::hash.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace mosare
