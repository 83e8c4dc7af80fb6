// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace oddetr {

/// A non-finite value appeared in a forward pass or loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented invariant was observed to be broken at run time.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad configuration (unknown key, inconsistent toggles, out-of-range value).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace oddetr
