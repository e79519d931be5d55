#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bdlab {

/// Base of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error record.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& message)
      : Error("config", path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& message) : Error("argument", message) {}
};

class TokenizeError : public Error {
 public:
  TokenizeError(char offending, std::size_t index)
      : Error("tokenize", "character " + describe(offending) + " at index " +
                              std::to_string(index) + " is outside the vocabulary"),
        offending_(offending) {}
  char offending() const noexcept { return offending_; }

 private:
  static std::string describe(char c) {
    const auto code = static_cast<unsigned char>(c);
    if (code >= 32 && code < 127) {
      return std::string("'") + c + "' (0x" + hex(code) + ")";
    }
    return "0x" + hex(code);
  }
  static std::string hex(unsigned code) {
    const char* digits = "0123456789abcdef";
    return {digits[(code >> 4) & 0xF], digits[code & 0xF]};
  }
  char offending_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& message)
      : Error("parse", "line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& message) : Error("capacity", message) {}
};

class LoadError : public Error {
 public:
  explicit LoadError(const std::string& message) : Error("load", message) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& message) : Error("data", message) {}
};

class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& message) : Error("divergence", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace bdlab
