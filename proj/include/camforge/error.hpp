#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace camforge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Spatial arithmetic does not work out (odd pooling dims, fractional conv output).
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// A model graph failed shape inference at a specific layer.
class ValidationError : public Error {
 public:
  ValidationError(std::size_t layer, const std::string& what)
      : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

/// Malformed, truncated or corrupted file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

class UnsupportedLayerError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Operation requires the other head kind.
class HeadKindError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values showed up (training divergence, corrupted inputs).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace camforge
