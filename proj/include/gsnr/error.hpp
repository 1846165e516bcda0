#pragma once

#include <stdexcept>
#include <string>

namespace gsnr {

/// Base class for all pipeline errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input that could not be parsed at all (bad JSON line, bad CSV row).
struct ParseError : Error {
  using Error::Error;
};

/// Input parsed but violates the expected schema (missing field, empty text).
struct SchemaError : Error {
  using Error::Error;
};

/// A caller broke an API contract (dimension mismatch, duplicate ids, bad enum).
struct ContractError : Error {
  using Error::Error;
};

/// NaN/Inf surfaced in the numeric path; carries the offending example id.
struct NumericalError : Error {
  explicit NumericalError(const std::string& msg, long long example_id = -1)
      : Error(msg), example_id(example_id) {}
  long long example_id;
};

/// A gradient log is missing cells required by the requested computation.
struct IncompleteLogError : Error {
  using Error::Error;
};

/// Truncation would leave no response token to compute a loss over.
struct ExampleTooLongError : Error {
  using Error::Error;
};

/// Filesystem-level failure (open, write, rename).
struct IoError : Error {
  using Error::Error;
};

}  // namespace gsnr
