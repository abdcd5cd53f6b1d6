#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace af {

/// Raised when a file cannot be read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input (annotation rows, config lines). Carries the
/// 1-based line number when one is known (0 otherwise).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Structurally invalid checkpoint file: bad magic, unsupported version,
/// truncation, or an unknown tensor name.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value where training must halt (NaN/Inf loss).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <typename T, typename... Rest>
void msg_append(std::ostringstream& os, T&& v, Rest&&... rest) {
  os << std::forward<T>(v);
  msg_append(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

/// Builds an error message from mixed parts: msg("axis ", i, " out of range").
template <typename... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  detail::msg_append(os, std::forward<Args>(args)...);
  return os.str();
}

}  // namespace af
