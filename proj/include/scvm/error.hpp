#pragma once

#include <stdexcept>
#include <string>

namespace scvm {

// Root of every error raised by the library. The CLI maps ConfigError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class UnsupportedPrimitiveError : public Error {
 public:
  using Error::Error;
};

class CapabilityError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class SupportMismatchError : public Error {
 public:
  using Error::Error;
};

class TuningError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite state in an integrator or particle simulation.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, double t) : Error(what + " (t = " + std::to_string(t) + ")"), time_(t) {}
  double time() const { return time_; }

 private:
  double time_;
};

class StiffnessError : public Error {
 public:
  StiffnessError(const std::string& what, double t) : Error(what + " (t = " + std::to_string(t) + ")"), time_(t) {}
  double time() const { return time_; }

 private:
  double time_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace scvm
