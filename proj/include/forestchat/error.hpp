// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace forestchat {

enum class ErrorKind {
    invalid_argument,
    dimension_mismatch,
    out_of_bounds,
    not_found,
    precondition,
    io,
    parse,
    protocol,
    backend,
    numeric,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::dimension_mismatch: return "dimension_mismatch";
    case ErrorKind::out_of_bounds: return "out_of_bounds";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::io: return "io";
    case ErrorKind::parse: return "parse";
    case ErrorKind::protocol: return "protocol";
    case ErrorKind::backend: return "backend";
    case ErrorKind::numeric: return "numeric";
    }
    return "unknown";
}

/// Single exception type for the library; `kind()` drives HTTP status mapping.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

} // namespace forestchat
