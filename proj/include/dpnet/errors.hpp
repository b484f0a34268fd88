#pragma once

#include <stdexcept>
#include <string>

namespace dpnet {

/// Precondition or shape violation by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration values (sampler fractions, train config, synth spec).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or unreadable data on disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ParseErrorKind { kIo, kBadMagic, kVersionMismatch, kTruncated, kNonFinite, kMalformed };

inline const char* to_string(ParseErrorKind kind) {
  switch (kind) {
    case ParseErrorKind::kIo: return "io";
    case ParseErrorKind::kBadMagic: return "bad magic";
    case ParseErrorKind::kVersionMismatch: return "version mismatch";
    case ParseErrorKind::kTruncated: return "truncated payload";
    case ParseErrorKind::kNonFinite: return "non-finite value";
    case ParseErrorKind::kMalformed: return "malformed";
  }
  return "unknown";
}

class ParseError : public DataError {
 public:
  ParseError(ParseErrorKind kind, const std::string& what)
      : DataError(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ParseErrorKind kind() const noexcept { return kind_; }

 private:
  ParseErrorKind kind_;
};

/// Raised by the optimizer when an update cannot be applied.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dpnet
