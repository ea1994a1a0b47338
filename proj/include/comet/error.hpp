#pragma once

#include <stdexcept>
#include <string>

namespace comet {

/// Operand shapes are incompatible with an operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// An id or index lies outside the valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// A call violated an API precondition (e.g. backward on a non-scalar).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Rating files that cannot be read or parsed; message carries file:line.
struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyDatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Optimization diverged (non-finite loss).
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed checkpoint file.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint parameter registry does not match the configured model.
struct VersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};

}  // namespace comet
