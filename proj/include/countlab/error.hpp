#pragma once

#include <stdexcept>
#include <string>

namespace countlab {

/// Base of every error the library raises. `exit_code()` is what the CLI
/// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

/// Invalid configuration (bad counts, grid sizes, schema violations).
class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// Malformed input data (token ids out of range, sequences too long).
class InputError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

/// An intervention description that cannot be applied to its target.
class SpecError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// A requested statistic cell has no data behind it.
class MissingDataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// A metric whose formula is undefined for the given inputs (zero denominator).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

class AggregationError : public Error {
public:
    using Error::Error;
};

} // namespace countlab
