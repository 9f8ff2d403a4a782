#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace c4d {

/// Process exit codes used by the command-line tools.
enum class ExitCode : int {
  kOk = 0,
  kValidation = 2,
  kTransport = 3,
  kNumerical = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kValidation; }
};

/// Mathematical precondition violated (non-finite input, negative density).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, camera, or stage plan.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad usage of an API (e.g. missing edited image at a guided level).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// File or checkpoint does not match the expected schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Dataset validation failure. Carries every violation found, not just the first.
class DatasetError : public SchemaError {
 public:
  explicit DatasetError(std::vector<std::string> violations)
      : SchemaError(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = "dataset validation failed (" + std::to_string(v.size()) + " violation(s))";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

/// Remote editor unreachable, timed out, or returned a malformed response.
class TransportError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kTransport; }
};

/// A loss or output went non-finite.
class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumerical; }
};

}  // namespace c4d
