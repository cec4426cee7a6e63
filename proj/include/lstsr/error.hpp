#pragma once

#include <stdexcept>
#include <string>

namespace lstsr {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied an argument outside the documented domain.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Tensor or raster extents do not line up.
class ShapeError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A file was readable but its contents are malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown: degenerate statistics, divergence, singular systems.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff graph (double backward, non-scalar loss).
class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace lstsr
