#pragma once

#include <stdexcept>
#include <string>

namespace qsci {

/// Invalid shapes, bad arguments, malformed configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Unreadable or inconsistent data files (bad magic, checksum, fingerprint).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf produced by a computation, or a violated accumulator bound.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace qsci
