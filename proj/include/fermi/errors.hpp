#pragma once

#include <stdexcept>
#include <string>

namespace fermi {

// Base class for every error the toolkit throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Rejected input: bad shapes, bad ranges, malformed files, broken
// referential integrity. The CLI maps these to exit code 2.
struct ValidationError : Error {
  using Error::Error;
};

// API misuse: calling operations in the wrong order or with missing state.
struct UsageError : Error {
  using Error::Error;
};

// A code path touched data its threat model forbids.
struct AccessViolation : Error {
  using Error::Error;
};

// Named schema/data validation failures, distinguishable in tests.
struct CycleError : ValidationError {
  using ValidationError::ValidationError;
};
struct DanglingFkError : ValidationError {
  using ValidationError::ValidationError;
};
struct UnknownCategoryError : ValidationError {
  using ValidationError::ValidationError;
};
struct DuplicateKeyError : ValidationError {
  using ValidationError::ValidationError;
};

// make_split cannot satisfy the requested partition sizes.
struct SizingError : ValidationError {
  using ValidationError::ValidationError;
};
// Sampling pools ran dry (challenge construction, feature selection).
struct PoolExhaustedError : ValidationError {
  using ValidationError::ValidationError;
};

// A pipeline stage ran before the stage it depends on.
struct StageDependencyError : UsageError {
  explicit StageDependencyError(const std::string& missing_stage)
      : UsageError("missing artifact dependency: run stage '" + missing_stage +
                   "' first"),
        stage(missing_stage) {}
  std::string stage;
};

// Artifacts from two different configurations were mixed in one run.
struct ConfigHashMismatchError : ValidationError {
  using ValidationError::ValidationError;
};

}  // namespace fermi
