#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bicanet {

/// Two tensors (or a tensor and a parameter) disagree on an extent.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& dimension, const std::string& what)
      : std::invalid_argument("shape mismatch in " + dimension + ": " + what),
        dimension_(dimension) {}

  const std::string& dimension() const noexcept { return dimension_; }

 private:
  std::string dimension_;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad label values or malformed dataset content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t offset, const std::string& what)
      : std::runtime_error("parse error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A metric was requested from a confusion matrix without any counted pixels.
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace bicanet
