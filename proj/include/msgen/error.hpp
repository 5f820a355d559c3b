#pragma once

#include <stdexcept>
#include <string>

namespace msgen {

// Exit codes used by the command-line tool. Each error class maps to one.
enum class ExitCode : int { ok = 0, validation = 2, data = 3, numerical = 4 };

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
    [[nodiscard]] virtual ExitCode code() const noexcept = 0;
};

/// Bad arguments, inconsistent shapes, or contract violations by the caller.
class ValidationError : public Error {
  public:
    using Error::Error;
    [[nodiscard]] ExitCode code() const noexcept override { return ExitCode::validation; }
};

/// Unreadable, malformed or missing input data.
class DataError : public Error {
  public:
    using Error::Error;
    [[nodiscard]] ExitCode code() const noexcept override { return ExitCode::data; }
};

/// Non-finite values or failed numerical procedures.
class NumericalError : public Error {
  public:
    using Error::Error;
    [[nodiscard]] ExitCode code() const noexcept override { return ExitCode::numerical; }
};

} // namespace msgen
