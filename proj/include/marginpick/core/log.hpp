#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

#include "marginpick/core/error.hpp"

namespace mp::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3 };

inline std::string_view to_string(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "?";
}

using Sink = std::function<void(Level, const std::string&)>;

namespace detail {
struct State {
  std::mutex mu;
  Level threshold = Level::info;
  Sink sink;
};
inline State& state() {
  static State s;
  return s;
}
}  // namespace detail

inline void set_level(Level l) {
  std::lock_guard lock(detail::state().mu);
  detail::state().threshold = l;
}

// Replaces the stderr writer; returns the previous sink (empty = stderr).
inline Sink set_sink(Sink sink) {
  std::lock_guard lock(detail::state().mu);
  std::swap(detail::state().sink, sink);
  return sink;
}

inline void write(Level l, const std::string& msg) {
  auto& s = detail::state();
  std::lock_guard lock(s.mu);
  if (l < s.threshold) return;
  if (s.sink) {
    s.sink(l, msg);
  } else {
    std::cerr << "[" << to_string(l) << "] " << msg << '\n';
  }
}

template <typename... Args>
void debug(Args&&... args) { write(Level::debug, cat(std::forward<Args>(args)...)); }
template <typename... Args>
void info(Args&&... args) { write(Level::info, cat(std::forward<Args>(args)...)); }
template <typename... Args>
void warn(Args&&... args) { write(Level::warn, cat(std::forward<Args>(args)...)); }
template <typename... Args>
void error(Args&&... args) { write(Level::error, cat(std::forward<Args>(args)...)); }

}  // namespace mp::log
