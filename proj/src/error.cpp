#include "asyncrl/error.hpp"

namespace arl {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::InvalidHyperparameter: return "invalid-hyperparameter";
    case ErrorKind::InvalidTrajectory: return "invalid-trajectory";
    case ErrorKind::InvalidBatch: return "invalid-batch";
    case ErrorKind::InvalidState: return "invalid-state";
    case ErrorKind::Conflict: return "conflict";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::Unavailable: return "unavailable";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace arl
