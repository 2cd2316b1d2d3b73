#pragma once

#include <stdexcept>
#include <string>

namespace octofuse {

/// Base for every error this library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an op requires.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyper-parameters, specs or experiment settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad values in input data (labels out of range, NaN pixels).
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by an op.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk file. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Training diverged; carries the global step index.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace octofuse
