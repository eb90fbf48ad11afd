#pragma once

#include <stdexcept>
#include <string>

namespace tsflora {

/// Operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration value or precondition is invalid. `key()` names the
/// offending field when one applies.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& message, std::string key = {})
      : std::invalid_argument(message), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// A cached forward pass no longer matches the parameters it was taken from.
class StaleCacheError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class DecodeErrorKind {
  kTruncated,
  kBadMagic,
  kBadVersion,
  kBadField,
  kCodeOverflow,
  kTrailingBytes,
};

const char* to_string(DecodeErrorKind kind) noexcept;

class DecodeError : public std::runtime_error {
 public:
  DecodeError(DecodeErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  DecodeErrorKind kind() const noexcept { return kind_; }

 private:
  DecodeErrorKind kind_;
};

}  // namespace tsflora
