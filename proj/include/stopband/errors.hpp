#pragma once

#include <stdexcept>
#include <string>

namespace stopband {

// Tensor shape / dimension mismatch.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid API usage or configuration.
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed file contents (dataset, checkpoint, config).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss or gradients during optimization.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace stopband
