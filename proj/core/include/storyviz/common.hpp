#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace storyviz {

namespace detail {

inline void format_into(std::ostringstream&) {}

template <typename Head, typename... Tail>
void format_into(std::ostringstream& os, const Head& head, const Tail&... tail) {
  os << head;
  format_into(os, tail...);
}

template <typename... Args>
std::string format_msg(const Args&... args) {
  std::ostringstream os;
  format_into(os, args...);
  return os.str();
}

[[noreturn]] inline void check_failed(const char* expr, const std::string& msg) {
  throw std::runtime_error("check failed: " + std::string(expr) +
                           (msg.empty() ? "" : (": " + msg)));
}

}  // namespace detail

// Runtime invariant check. Always active; violations throw std::runtime_error.
#define SV_CHECK(cond, ...)                                                  \
  do {                                                                       \
    if (!(cond)) {                                                           \
      ::storyviz::detail::check_failed(#cond,                                \
          ::storyviz::detail::format_msg(__VA_ARGS__));                     \
    }                                                                        \
  } while (0)

}  // namespace storyviz
