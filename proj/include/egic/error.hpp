#pragma once

#include <stdexcept>
#include <string>

namespace egic {

// Every failure surfaced by the library derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values or unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a precondition (shape mismatch, out-of-range argument).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Bitstream or checkpoint produced by a different model.
class IncompatibleModel : public Error {
 public:
  using Error::Error;
};

/// Truncated or tampered bitstream / checkpoint.
class CorruptData : public Error {
 public:
  using Error::Error;
};

/// Unreadable input files.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Statistics requested over too few samples.
class InsufficientSamples : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class Divergence : public Error {
 public:
  using Error::Error;
};

/// Entropy model cannot produce a valid CDF.
class ModelPreparationError : public Error {
 public:
  using Error::Error;
};

#define EGIC_REQUIRE(cond, msg)                 \
  do {                                          \
    if (!(cond)) throw ::egic::ContractViolation(msg); \
  } while (0)

}  // namespace egic
