#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace stackdiff {

// Root of every exception thrown by the library. `kind()` is a stable
// machine-readable tag used by the CLI and the HTTP service.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message, std::string kind = "error")
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t line = 0)
      : Error(line ? message + " (line " + std::to_string(line) + ")" : message, "parse_error"),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& message) : Error(message, "integrity_error") {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& message) : Error(message, "shape_error") {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error(message, "config_error") {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error(message, "io_error") {}
};

class NotFoundError : public Error {
 public:
  explicit NotFoundError(const std::string& message) : Error(message, "not_found") {}
};

// A record in a corpus manifest could not be materialized.
class RecordError : public Error {
 public:
  RecordError(const std::string& goal_id, const std::string& message)
      : Error("goal " + goal_id + ": " + message, "record_error"), goal_id_(goal_id) {}
  const std::string& goal_id() const noexcept { return goal_id_; }

 private:
  std::string goal_id_;
};

}  // namespace stackdiff
