#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace dsv {

/// Error with a short machine-parsable code ("shape-mismatch", "bad-magic", ...)
/// plus a human-readable message. The CLI prints `error: <code>: <message>`.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

}  // namespace dsv
