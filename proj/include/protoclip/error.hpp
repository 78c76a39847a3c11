#pragma once

#include <stdexcept>
#include <string>

namespace protoclip {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its mathematical domain (e.g. temperature <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data is unusable (non-finite values, degenerate samples).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A row has (numerically) zero norm and cannot be normalized.
class DegenerateRowError : public DataError {
 public:
  DegenerateRowError(std::size_t row, const std::string& what)
      : DataError(what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// A function under numerical verification produced a non-finite value.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written, or has the wrong layout.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace protoclip
