#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace adm {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes, dimensions or hyper-parameters that do not fit together.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf or otherwise unusable numbers.
class NumericError : public Error {
public:
    using Error::Error;
};

/// A covariance (or other matrix) that is not positive definite.
class SingularityError : public NumericError {
public:
    SingularityError(const std::string& what, std::size_t pivot)
        : NumericError(what + " (pivot " + std::to_string(pivot) + ")"), pivot_(pivot) {}

    std::size_t pivot() const noexcept { return pivot_; }

private:
    std::size_t pivot_;
};

/// Input data that cannot be processed (empty masks, constant channels, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// Malformed or foreign file contents.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " at byte " + std::to_string(offset)), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Metric that is not defined for the given labels (e.g. single class).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

/// Caller misuse, e.g. scoring with a bundle that has no frozen mixture.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace adm
