#pragma once

#include <stdexcept>
#include <string>

namespace rarelens {

// Base of every error the library throws. `exit_code()` is what the CLI
// returns when the error escapes a command.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 1)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension error: " + what) {}
};

class DegenerateVectorError : public Error {
 public:
  explicit DegenerateVectorError(const std::string& what)
      : Error("degenerate vector: " + what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract violation: " + what) {}
};

class EvaluationError : public Error {
 public:
  explicit EvaluationError(const std::string& what) : Error("evaluation error: " + what) {}
};

class LengthError : public Error {
 public:
  explicit LengthError(const std::string& what) : Error("length error: " + what) {}
};

// A class has no samples where at least one is required.
class CoverageError : public Error {
 public:
  explicit CoverageError(const std::string& what) : Error("coverage error: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

// A quality gate (fixture, prototype) was not met.
class GateError : public Error {
 public:
  explicit GateError(const std::string& what) : Error("gate failure: " + what, 3) {}
};

// Corrupted file, checksum mismatch, or mismatched artifact pairing.
class ChecksumError : public Error {
 public:
  explicit ChecksumError(const std::string& what) : Error("checksum error: " + what, 4) {}
};

}  // namespace rarelens
