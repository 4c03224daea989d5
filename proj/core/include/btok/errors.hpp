#pragma once

#include <stdexcept>
#include <string>

namespace btok {

// Invalid configuration value. `field()` names the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Shape, length or index contract violated by an input.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed, or an undefined quantity such as a zero-norm cosine.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed, truncated or version-mismatched file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Work refused because a resource estimate exceeds the configured budget.
class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace btok
