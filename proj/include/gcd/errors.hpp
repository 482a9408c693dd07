#pragma once

#include <stdexcept>
#include <string>

namespace gcd {

// Invalid user-supplied configuration or precondition violation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class FormatErrorKind {
  kBadMagic,
  kUnsupportedVersion,
  kUnsupportedDtype,
  kTruncated,
  kDimOverflow,
  kInconsistentManifest,
  kMalformedJson,
};

const char* to_string(FormatErrorKind kind);

// A persisted artifact could not be decoded.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

// Filesystem failure (missing directory, unwritable path, ...).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a NaN/Inf loss.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gcd
