#pragma once

#include <stdexcept>
#include <string>

namespace arl {

enum class ErrorKind {
  InvalidInput,
  InvalidHyperparameter,
  InvalidTrajectory,
  InvalidBatch,
  InvalidState,
  Conflict,
  NotFound,
  Unavailable,
  Integrity,
  Config,
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

// All library failures surface as this type; the C API maps kind() to a
// status code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace arl
