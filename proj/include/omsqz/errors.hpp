#pragma once

#include <stdexcept>
#include <string>

namespace omsqz {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Config file problems; carries the section/line context in the message.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Both pump tones are zero, so the intracavity power ratio is undefined.
class ZeroPumpError : public Error {
 public:
  using Error::Error;
};

/// Gamma_eff <= 0 or |s| >= 1.
class InstabilityError : public Error {
 public:
  enum class Kind { AntiDamping, Parametric };
  InstabilityError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// An identity that holds analytically was violated numerically.
class InternalConsistencyError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

/// More fits failed than a command's configured threshold allows.
class FitThresholdError : public Error {
 public:
  using Error::Error;
};

}  // namespace omsqz
