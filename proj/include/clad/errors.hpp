#pragma once

#include <stdexcept>
#include <string>

namespace clad {

// Error taxonomy shared by every module. The CLI maps UsageError to exit
// code 2 and everything else to exit code 1.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/axis mismatch between tensors.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Caller violated an API contract (bad arguments, wrong call order).
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

// A computation produced NaN/Inf from finite inputs.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Persistent data (dataset directory, checkpoint) is inconsistent.
struct IntegrityError : Error {
    explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

// A file could not be parsed at the byte level.
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

}  // namespace clad
