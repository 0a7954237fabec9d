#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ibpica {

/// Base of every exception thrown by the library. The C API maps each
/// subclass onto one status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch, empty input or otherwise unusable argument.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown (non-PD matrix, non-positive posterior parameter).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary container or text file.
class FormatError : public Error {
 public:
  using Error::Error;
};

struct FieldDiagnostic {
  std::string field;
  std::string message;
};

/// Configuration rejected during validation; carries one entry per bad field.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<FieldDiagnostic> diagnostics);
  const std::vector<FieldDiagnostic>& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::vector<FieldDiagnostic> diagnostics_;
};

/// Emit a non-fatal warning. Defaults to stderr; replaceable for embedding.
void warn(const std::string& message);
using WarningSink = void (*)(const char* message, void* user);
void set_warning_sink(WarningSink sink, void* user);

}  // namespace ibpica
