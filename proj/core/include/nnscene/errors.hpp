#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nnscene {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Array or grid dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration that cannot be used (bad parameter ranges, impossible
/// budgets). The CLI maps these to a usage exit code.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input. Carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::uint64_t offset);

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// A numeric failure at run time (non-finite loss, empty evaluation).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace nnscene
