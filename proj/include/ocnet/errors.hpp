#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ocnet {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StepLimitExceeded : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf in an integrated state or stage derivative.
class NonFiniteState : public Error {
 public:
  using Error::Error;
};

/// Euler-angle kinematics evaluated at |pitch| >= pi/2 - 1e-6.
class GimbalLock : public Error {
 public:
  using Error::Error;
};

class OutOfSpan : public Error {
 public:
  using Error::Error;
};

class NewtonDiverged : public Error {
 public:
  using Error::Error;
};

class ContinuationFailed : public Error {
 public:
  ContinuationFailed(std::size_t stage, const std::string& what)
      : Error("continuation failed at stage " + std::to_string(stage) + ": " + what), stage_(stage) {}
  std::size_t stage() const noexcept { return stage_; }

 private:
  std::size_t stage_;
};

class TooManyFailures : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class SchemaMismatch : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

class AllRolloutsDiverged : public Error {
 public:
  using Error::Error;
};

class MissingReference : public Error {
 public:
  using Error::Error;
};

class MissingArtifact : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ocnet
