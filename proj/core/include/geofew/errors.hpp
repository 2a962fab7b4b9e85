#pragma once

#include <stdexcept>
#include <string>

namespace geofew {

/// Base class for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Incompatible tensor shapes (messages name both shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Numerically degenerate input, e.g. a near-zero vector fed to a normalizer.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. novel stream before
/// duplication).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed external input; message carries the location.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// log/exp style domain violations that survive the clamping policy.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a verified-immutable parameter changed: training
/// aborts hard on these.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace geofew
