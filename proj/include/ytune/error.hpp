#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ytune {

// All library failures derive from Error so callers (the CLI in particular)
// can map them onto exit codes without caring about the concrete kind.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class InputError : public Error { using Error::Error; };
class UsageError : public Error { using Error::Error; };
class InitError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class IntegrityError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class TruncationError : public FormatError {
 public:
  TruncationError(const std::string& what, std::uint64_t offset)
      : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace ytune
