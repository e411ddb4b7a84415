#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace refprior {

enum class ErrorKind {
  Usage,      // bad arguments or configuration
  Shape,      // tensor/image shape contract violated
  Domain,     // value outside the accepted range
  Format,     // malformed file contents
  Io,         // file system failure
  Numerical,  // NaN/Inf encountered
};

const char* to_string(ErrorKind kind);

// Single exception type carried through the library. `offset` is set for
// format errors that can point at a byte position in the offending file.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message,
        std::optional<std::uint64_t> offset = std::nullopt);

  ErrorKind kind() const noexcept { return kind_; }
  std::optional<std::uint64_t> offset() const noexcept { return offset_; }
  // Message without the kind prefix and offset suffix.
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
  std::optional<std::uint64_t> offset_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace refprior
