#pragma once

#include <stdexcept>
#include <string>

namespace oodcv {

/// Raised when a caller breaks an operation's precondition (bad dimensions,
/// out-of-range arguments).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid or inconsistent configuration. `field()` carries the dotted path of
/// the offending entry when one is known, e.g. "benchmark.num_classes".
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& message, std::string field = {})
      : std::runtime_error(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Filesystem or codec failure; the message always names the path involved.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define OODCV_REQUIRE(cond, msg)                          \
  do {                                                    \
    if (!(cond)) throw ::oodcv::ContractViolation(msg);   \
  } while (0)

}  // namespace oodcv
