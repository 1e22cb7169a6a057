#pragma once

#include <concepts>
#include <cstdio>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace kplora {

// Base of every error the library throws. `is_validation()` separates bad
// user input (exit code 2) from internal failures (exit code 1).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
  virtual bool is_validation() const noexcept { return false; }
};

class ValidationError : public Error {
public:
  using Error::Error;
  bool is_validation() const noexcept override { return true; }
};

// Malformed text input; `offset` is the byte offset of the first problem.
class FormatError : public ValidationError {
public:
  FormatError(const std::string& what, std::size_t offset)
      : ValidationError(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

class VocabularyError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

class SchemaError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
  using ValidationError::ValidationError;
};

// A caller broke a documented precondition (shape mismatch, empty mask, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  IoError(const std::string& path, const std::string& cause)
      : Error(path + ": " + cause), path_(path) {}
  const std::string& path() const noexcept { return path_; }

private:
  std::string path_;
};

class DivergenceError : public Error {
public:
  DivergenceError(long step, double learning_rate)
      : Error("non-finite loss at step " + std::to_string(step) + " (learning rate " +
              format_g(learning_rate) + ")"),
        step_(step), learning_rate_(learning_rate) {}
  long step() const noexcept { return step_; }
  double learning_rate() const noexcept { return learning_rate_; }

private:
  static std::string format_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
  }

  long step_;
  double learning_rate_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

// Builds the message only on failure.
template <std::invocable F>
void require(bool condition, F&& make_message) {
  if (!condition) throw ContractError(std::forward<F>(make_message)());
}

}  // namespace kplora
