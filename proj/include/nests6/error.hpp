#pragma once

#include <stdexcept>
#include <string>

namespace nests6 {

// Error taxonomy maps onto CLI exit codes: config/usage -> 1, data -> 2,
// numerical failure -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Shape/contract violations are programming or configuration mistakes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace nests6
