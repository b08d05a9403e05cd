#pragma once

#include <stdexcept>
#include <string>

namespace dozer {

/// Shape or dimension disagreement between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid attention-mask geometry or an all-false row reaching attention.
struct MaskError : std::runtime_error {
    explicit MaskError(const std::string& what) : std::runtime_error(what) {}
};

/// Bad hyperparameter or inconsistent configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input data (CSV cells, ragged rows, non-finite values).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite state encountered during optimization.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dozer
