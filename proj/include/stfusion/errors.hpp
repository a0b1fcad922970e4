#pragma once

#include <stdexcept>

namespace stf {

// Incompatible tensor shapes; the message names both shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A caller violated an operation's precondition.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed or truncated file.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct SizeError : std::length_error {
    using std::length_error::length_error;
};

// Read of state that was never written (running statistics, gradients).
struct UninitializedError : std::logic_error {
    using std::logic_error::logic_error;
};

// Non-finite loss during training.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace stf
