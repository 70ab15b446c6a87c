#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

// Raised when training produces non-finite losses, gradients, or parameters.
// The simulator catches this and reports the offending round.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

// Raised by config parsing/validation; the message names the offending field.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fedsim
