#pragma once

#include <stdexcept>
#include <string>

namespace bnft {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents, bad axes, channel mismatches.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/inf values where a finite number is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Optimisation did not reach a required quality level.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace bnft
