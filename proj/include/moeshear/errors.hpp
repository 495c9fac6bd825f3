#pragma once

#include <stdexcept>
#include <string>

namespace moeshear {

// Error taxonomy mirrors the CLI exit codes: ConfigError -> 2,
// DataError -> 3, NumericError -> 4.

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape mismatch between tensors; message names both shapes.
class DimensionError : public DataError {
public:
    using DataError::DataError;
    DimensionError(const std::string& context,
                   long rows_a, long cols_a,
                   long rows_b, long cols_b)
        : DataError(context + ": got " + std::to_string(rows_a) + "x" +
                    std::to_string(cols_a) + " vs " + std::to_string(rows_b) +
                    "x" + std::to_string(cols_b)) {}
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace moeshear
