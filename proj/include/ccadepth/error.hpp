#pragma once

#include <stdexcept>
#include <string>

namespace ccadepth {

// Invalid physical or numerical argument (bad distance, non-positive depth, ...).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

// Mismatched array dimensions between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed container or config file. Carries a line number when known.
struct ParseError : std::runtime_error {
    ParseError(const std::string& what, long line = -1)
        : std::runtime_error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
          line_number(line) {}
    long line_number;
};

// Filesystem-level failure (missing file, short read, unwritable path).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Objects produced under different configurations were combined.
struct ConsistencyError : std::runtime_error {
    explicit ConsistencyError(const std::string& what) : std::runtime_error(what) {}
};

// Training hit a non-finite loss; carries the diagnostic dump location.
struct NanAbortError : std::runtime_error {
    explicit NanAbortError(const std::string& what, std::string dump = {})
        : std::runtime_error(what), dump_path(std::move(dump)) {}
    std::string dump_path;
};

}  // namespace ccadepth
