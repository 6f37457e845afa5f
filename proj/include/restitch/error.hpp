#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace restitch {

enum class ErrorKind {
    dimension,
    configuration,
    contract,
    range,
    lookup,
    format,
    corruption,
    dtype,
    data,
    pairing,
    assembly,
    infeasible,
    unsupported,
    io,
    divergence,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::configuration: return "configuration";
        case ErrorKind::contract: return "contract";
        case ErrorKind::range: return "range";
        case ErrorKind::lookup: return "lookup";
        case ErrorKind::format: return "format";
        case ErrorKind::corruption: return "corruption";
        case ErrorKind::dtype: return "dtype";
        case ErrorKind::data: return "data";
        case ErrorKind::pairing: return "pairing";
        case ErrorKind::assembly: return "assembly";
        case ErrorKind::infeasible: return "infeasible";
        case ErrorKind::unsupported: return "unsupported";
        case ErrorKind::io: return "io";
        case ErrorKind::divergence: return "divergence";
    }
    return "unknown";
}

/// Process exit code for an error kind: 2 contract violation, 3 I/O or
/// corruption, 4 infeasible plan.
inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::io:
        case ErrorKind::corruption:
        case ErrorKind::format:
            return 3;
        case ErrorKind::infeasible:
            return 4;
        default:
            return 2;
    }
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Raised when every candidate stitch point violates the budget.
class NoFeasibleStitch : public Error {
public:
    NoFeasibleStitch(const std::string& message, std::int64_t min_cost)
        : Error(ErrorKind::infeasible, message), min_cost_(min_cost) {}

    /// Smallest cost over all synthesizable candidates, or -1 if none exist.
    std::int64_t min_cost() const noexcept { return min_cost_; }

private:
    std::int64_t min_cost_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace restitch
