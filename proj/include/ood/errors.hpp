#pragma once

#include <stdexcept>
#include <string>

namespace ood {

// All library errors derive from Error so callers can catch one type at the
// boundary. The subclasses matter for exit-code mapping in the CLI: config
// and input problems (ParseError, ValueError, UsageError) are the caller's
// fault, everything else is a runtime failure.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor or matrix dimensions do not line up.
struct ShapeError : Error {
  using Error::Error;
};

// A numeric argument is outside its documented range (negative temperature,
// dropout probability >= 1, non-finite scale factor, ...).
struct ValueError : Error {
  using Error::Error;
};

// The API was driven incorrectly: empty dataset, backward on a non-scalar,
// mismatched member models in an ensemble.
struct UsageError : Error {
  using Error::Error;
};

// Optimization diverged (non-finite loss or parameters).
struct TrainError : Error {
  using Error::Error;
};

// A scoring method produced or encountered a non-finite value.
struct ScoreError : Error {
  using Error::Error;
};

// Malformed config or data file. Messages carry file and line/row context.
struct ParseError : Error {
  using Error::Error;
};

} // namespace ood
