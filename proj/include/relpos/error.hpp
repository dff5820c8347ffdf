#pragma once

#include <stdexcept>
#include <string>

namespace relpos {

// Base for all library errors so callers can catch one type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement; message names both shapes.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Out-of-range index (class targets, row gathers, vocab ids).
struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration detected before or at the start of a computation.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// API misuse: a precondition that is not a shape or config issue.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf encountered where all values must be finite.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Persisted artifact fails validation (bad length, checksum, version).
struct IntegrityError : Error {
    explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

}  // namespace relpos
