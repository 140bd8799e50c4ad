#pragma once

#include <stdexcept>
#include <string>

namespace convnova {

/// Library error carrying a short machine-readable cause tag
/// (e.g. "shape_mismatch", "bad_magic") next to the human message.
class Error : public std::runtime_error {
 public:
  Error(std::string cause, const std::string& message)
      : std::runtime_error(message), cause_(std::move(cause)) {}

  const std::string& cause() const noexcept { return cause_; }

 private:
  std::string cause_;
};

[[noreturn]] inline void fail(std::string cause, const std::string& message) {
  throw Error(std::move(cause), message);
}

inline void require(bool condition, const char* cause, const std::string& message) {
  if (!condition) fail(cause, message);
}

}  // namespace convnova
