#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace avr {

enum class ErrorKind {
  invalid_input,
  invalid_config,
  dimension_mismatch,
  bad_magic,
  version_mismatch,
  truncated,
  label_out_of_range,
  numeric,
  empty_input,
  io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid_input";
    case ErrorKind::invalid_config: return "invalid_config";
    case ErrorKind::dimension_mismatch: return "dimension_mismatch";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::version_mismatch: return "version_mismatch";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::label_out_of_range: return "label_out_of_range";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::empty_input: return "empty_input";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so callers (and the CLI)
/// can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace avr
