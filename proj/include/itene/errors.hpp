#pragma once

#include <stdexcept>
#include <string>

namespace itene {

// Base class for everything the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid hyperparameters, sizes or options.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dimension mismatch between parameters, inputs or gradients.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf appeared in a loss, an output or a gradient.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, int epoch = -1)
      : Error(what), epoch_(epoch) {}

  // Training epoch at which the failure was detected, -1 when not training.
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

// Malformed or unreadable input files.
class InputError : public Error {
 public:
  using Error::Error;
};

}  // namespace itene
