#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace mp {

enum class ErrorKind {
  argument,
  config,
  shape,
  numeric,
  state,
  not_found,
  data,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::argument: return "argument";
    case ErrorKind::config: return "config";
    case ErrorKind::shape: return "shape";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::state: return "state";
    case ErrorKind::not_found: return "not-found";
    case ErrorKind::data: return "data";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

// Single exception type for the whole library; the kind selects the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Process exit codes: 0 success, distinct nonzero codes per failure family.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
    case ErrorKind::io: return 5;
    default: return 1;
  }
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

template <typename... Args>
[[noreturn]] void fail(ErrorKind kind, Args&&... args) {
  throw Error(kind, cat(std::forward<Args>(args)...));
}

}  // namespace mp
