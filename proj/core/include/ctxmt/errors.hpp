#pragma once

#include <stdexcept>
#include <string>

namespace ctxmt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad runtime data (shape mismatches, non-finite values, ...).
struct InvalidInput : Error {
  using Error::Error;
};

// Bad configuration (unknown mode, K < 1, ...).
struct InvalidConfig : Error {
  using Error::Error;
};

// Operation not legal in the current state (out-of-order cache push, ...).
struct InvalidState : Error {
  using Error::Error;
};

// Malformed file contents; message carries the offending line number.
struct ParseError : Error {
  using Error::Error;
};

// Structurally valid record that violates the documented schema.
struct SchemaError : Error {
  using Error::Error;
};

// Input longer than the model's position table.
struct TruncationError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace ctxmt
