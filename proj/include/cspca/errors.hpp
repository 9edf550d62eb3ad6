// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cspca {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent file content. `field()` names the offending entry.
class ParseError : public Error {
 public:
  ParseError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Tensor or grid shapes that do not line up. `dimension()` names the axis.
class ShapeError : public Error {
 public:
  ShapeError(std::string dimension, const std::string& what)
      : Error("shape mismatch in " + dimension + ": " + what), dimension_(std::move(dimension)) {}
  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string dimension_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cspca
