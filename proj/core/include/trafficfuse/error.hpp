#pragma once

#include <stdexcept>
#include <string>

namespace trafficfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. The message carries the file and line/record locus.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A structural invariant was violated (self-loop, bad capacity, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A function argument is outside its documented domain.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Input data is inconsistent (negative flow, shape mismatch, non-edge pair).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A linear system is not Schur-stable where stability is required.
class StabilityError : public Error {
 public:
  StabilityError(const std::string& what, double radius)
      : Error(what), radius_(radius) {}
  double radius() const noexcept { return radius_; }

 private:
  double radius_;
};

/// Training diverged or produced non-finite values.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Raised by the pipeline; wraps the failing stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace trafficfuse
