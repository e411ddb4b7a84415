#include "refprior/error.hpp"

namespace refprior {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
    case ErrorKind::Numerical: return "numerical";
  }
  return "unknown";
}

namespace {

std::string decorate(ErrorKind kind, const std::string& message,
                     std::optional<std::uint64_t> offset) {
  std::string out = std::string(to_string(kind)) + " error: " + message;
  if (offset) out += " (at byte " + std::to_string(*offset) + ")";
  return out;
}

}  // namespace

Error::Error(ErrorKind kind, const std::string& message,
             std::optional<std::uint64_t> offset)
    : std::runtime_error(decorate(kind, message, offset)),
      kind_(kind),
      message_(message),
      offset_(offset) {}

void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace refprior
