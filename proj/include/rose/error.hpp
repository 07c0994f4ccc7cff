#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rose {

// Base for every error raised by the library. The CLI maps the concrete
// subclass to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside a function's domain (e.g. a non-positive sqrt-link
// linear predictor).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Non-finite intermediate, singular information, failed solve.
class NumericError : public Error {
 public:
  using Error::Error;

  NumericError(const std::string& what, std::size_t index)
      : Error(what + " (observation " + std::to_string(index) + ")"),
        index_(index),
        has_index_(true) {}

  bool has_index() const { return has_index_; }
  std::size_t index() const { return index_; }

 private:
  std::size_t index_ = 0;
  bool has_index_ = false;
};

// Settings that cannot work together (too few rows for K folds, J larger
// than the model's moment count, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input files.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace rose
