#pragma once

#include <stdexcept>
#include <string>

namespace abstain {

// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: malformed files, schema violations, invalid flags. The CLI maps
// this family to exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& msg, std::size_t line)
      : ValidationError("line " + std::to_string(line) + ": " + msg), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class JoinError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Mathematical precondition failed (tau <= 0, empty sample, undefined AUROC...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class SeparationError : public DomainError {
 public:
  using DomainError::DomainError;
};

class RankError : public DomainError {
 public:
  using DomainError::DomainError;
};

class ConvergenceError : public DomainError {
 public:
  using DomainError::DomainError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CacheMissError : public Error {
 public:
  explicit CacheMissError(const std::string& hash)
      : Error("replay cache miss for request " + hash), hash_(hash) {}
  const std::string& hash() const noexcept { return hash_; }

 private:
  std::string hash_;
};

class ExtractionError : public Error {
 public:
  using Error::Error;
};

}  // namespace abstain
