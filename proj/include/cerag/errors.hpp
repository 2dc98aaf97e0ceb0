#pragma once

#include <stdexcept>
#include <string>

namespace cerag {

// Bad user input: malformed config, invalid flag combination, out-of-range
// hyperparameter. The CLI maps this to exit code 1.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed data file (JSONL, checkpoint, index). Message carries file and,
// where applicable, line context. The CLI maps this to exit code 2.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// File could not be opened, read, or written.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cerag
