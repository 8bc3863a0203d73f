#pragma once

#include <stdexcept>
#include <string>

namespace unseg {

/// Thrown on contract violations (bad shapes, invalid arguments, broken invariants).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

}  // namespace unseg
