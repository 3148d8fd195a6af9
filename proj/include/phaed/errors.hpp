#pragma once

#include <stdexcept>
#include <string>

namespace phaed {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed input file (corpus, embedding store, checkpoint).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Corpus file contained no usable conversations.
class EmptyCorpusError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An index exceeded a configured capacity (names the offending dimension).
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Attention slices were not retained during the forward pass.
class IntrospectionError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given input (e.g. empty token set).
class MetricError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or hit an unrecoverable numeric state.
class TrainError : public Error {
 public:
  using Error::Error;
};

}  // namespace phaed
