#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metaemg {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed recording file. Carries the 1-based line number of the offending
/// line (0 when the problem is not tied to a line, e.g. a missing file).
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& msg)
      : Error(source + ":" + std::to_string(line) + ": " + msg), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A recording's cue script does not have the expected motion structure.
class StructureError : public Error {
 public:
  using Error::Error;
};

}  // namespace metaemg
