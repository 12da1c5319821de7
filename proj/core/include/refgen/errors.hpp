#pragma once

#include <stdexcept>
#include <string>

namespace refgen {

// Shape/precondition violations: wrong dims, bad arguments, broken contracts.
struct ContractError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ShapeError : ContractError {
    using ContractError::ContractError;
};

// Numeric failures: NaN inputs, diverged losses.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed files. `offset` is the byte position where parsing gave up.
struct ParseError : std::runtime_error {
    size_t offset;
    ParseError(const std::string& msg, size_t off)
        : std::runtime_error(msg + " (byte " + std::to_string(off) + ")"), offset(off) {}
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace refgen
