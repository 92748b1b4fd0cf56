#pragma once

#include <stdexcept>
#include <string>

namespace degenlag {

/// A state or parameter lies outside the region where a model is defined.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A linear system could not be solved to working precision.
class SingularMatrixError : public std::runtime_error {
 public:
  explicit SingularMatrixError(const std::string& what, double condition = 0.0)
      : std::runtime_error(what), condition_(condition) {}

  [[nodiscard]] double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

/// Invalid user configuration (bad flags, malformed config files, impossible sampling).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative numerical method failed (step-size underflow, NaN loss, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace degenlag
