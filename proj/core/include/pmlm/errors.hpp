#pragma once

#include <stdexcept>
#include <string>

namespace pmlm {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class TapeCorruptionError : public Error {
 public:
  using Error::Error;
};

// The finite-difference oracle cannot be trusted (loss not reproducible).
class OracleInvalidError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf was produced. `op()` names the producing operation.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string op, const std::string& detail)
      : Error("non-finite value produced by '" + op + "'" + (detail.empty() ? "" : ": " + detail)),
        op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

}  // namespace pmlm
