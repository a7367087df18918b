#pragma once

#include <stdexcept>
#include <string>

namespace msplora {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension/shape violations (matmul mismatch, merge shape, bad token ids).
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration values: ranks, layer counts, config files, CLI args.
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite values or a failed numerical contract.
struct NumericError : Error {
  using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace msplora
