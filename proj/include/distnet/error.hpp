#pragma once

#include <stdexcept>
#include <string>

namespace distnet {

enum class ErrorKind {
  Shape,
  Config,
  Numeric,
  State,
  Format,
  Io,
};

const char* to_string(ErrorKind kind);

/// Every failure raised by the library carries a category so the CLI can map
/// it to a distinct exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

}  // namespace distnet
