// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dynreg {

// Error categories map one-to-one onto CLI exit codes:
//   ConfigError -> 2, NumericError -> 3, IoError -> 4.
// Shape and argument violations inside the graph throw
// std::invalid_argument and indicate a caller bug rather than bad input.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dynreg
