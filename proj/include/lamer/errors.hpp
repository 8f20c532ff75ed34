// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lamer {

/// Base of every error raised by the library. Callers that only need to
/// report a failure can catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// An index (class id, expert id, frame id) is outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An operation was called on an object that is not in the required state
/// (missing forward cache, empty statistics, empty corpus).
class StateError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or hyperparameters.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Input data cannot satisfy an algorithm's precondition.
class DataError : public Error {
public:
    using Error::Error;
};

/// A serialized file has a bad magic number, version or layout.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure or truncated file.
class IoError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// An internal invariant was violated (e.g. a frozen tensor changed).
class InternalError : public Error {
public:
    using Error::Error;
};

}  // namespace lamer
