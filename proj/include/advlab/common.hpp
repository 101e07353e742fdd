#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace advlab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch in a tensor operation.
struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf produced by an operation, or divergence during training.
struct NumericError : Error {
    using Error::Error;
};

// Bad user input: config files, CLI flags, invalid parameter combinations.
struct ConfigError : Error {
    using Error::Error;
};

// Missing/corrupt data: datasets, corpora, checkpoints.
struct DataError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << args);
    return oss.str();
}

}  // namespace detail

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace advlab
