// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace diet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, solver non-convergence, etc.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An operation was requested for a position scheme that does not support it.
class SchemeError : public Error {
 public:
  using Error::Error;
};

/// A bias cache was used after the parameters it was built from changed.
class StalenessError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training loss exceeded the divergence threshold.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Timer resolution is too coarse for the requested measurement.
class MeasurementError : public Error {
 public:
  using Error::Error;
};

}  // namespace diet
