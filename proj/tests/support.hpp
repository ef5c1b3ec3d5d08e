#pragma once

#include <optional>

#include "asyncrl/error.hpp"

// Kind of the arl::Error thrown by f, or nullopt when f returns normally.
template <typename F>
std::optional<arl::ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const arl::Error& e) {
    return e.kind();
  }
  return std::nullopt;
}
