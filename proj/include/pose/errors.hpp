#pragma once

#include <stdexcept>
#include <string>

namespace pose {

// Invalid or inconsistent configuration. CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A training loop produced NaN/inf or diverged. CLI exit code 2.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Evaluation could not be completed. CLI exit code 3.
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pose
