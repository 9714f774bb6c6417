#pragma once

#include <stdexcept>
#include <string>

namespace tah {

/// Base of every error raised by the library. Each subclass names one
/// failure category so callers (and the CLI's exit-code mapping) can
/// dispatch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// The 2D KV cache does not hold the shallower entries a query requires.
class CacheError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

/// Labels and corpus disagree on sequence count or lengths.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

class TokenizationError : public Error {
 public:
  using Error::Error;
};

class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage ran before the artifact it consumes was produced.
class DependencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace tah
