#pragma once

#include <stdexcept>
#include <string>

namespace lvmi {

/**
 * Syntax error in a model-specification file. Carries the 1-indexed line and
 * column of the offending token; the what() message already embeds them.
 */
class parse_error : public std::runtime_error {
 public:
  parse_error(const std::string& message, int line, int column)
      : std::runtime_error("line " + std::to_string(line) + ", column " +
                           std::to_string(column) + ": " + message),
        line_(line),
        column_(column) {}

  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

/** Semantic problem with a model: undeclared variable, unidentified latent, … */
class model_error : public std::runtime_error {
 public:
  explicit model_error(const std::string& message)
      : std::runtime_error(message) {}
};

/** Problem with a dataset: missing column, non-numeric cell, … */
class data_error : public std::runtime_error {
 public:
  explicit data_error(const std::string& message)
      : std::runtime_error(message) {}
};

/** File-system level failure: unreadable or unwritable path. */
class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& message)
      : std::runtime_error(message) {}
};

/**
 * Numerical failure: singular information, non-positive-definite matrix,
 * degrees-of-freedom domain violations, non-converged iterations where an
 * answer is required, …
 */
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& message)
      : std::runtime_error(message) {}
};

}  // namespace lvmi
