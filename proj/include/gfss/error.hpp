#pragma once

#include <stdexcept>
#include <string>

namespace gfss {

// Root of every error the library throws. The CLI maps ConfigError to a
// usage failure (exit 2) and everything else to a runtime failure (exit 1).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A domain invariant was violated (zero-norm prototype, non-finite value...).
class InvariantError : public Error {
 public:
  using Error::Error;
};

// Checkpoint phase/taxonomy does not fit the requested stage.
class LineageError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

// Loss with no contributing pixels.
class UndefinedLossError : public Error {
 public:
  using Error::Error;
};

}  // namespace gfss
