#pragma once

#include <stdexcept>
#include <string>

namespace r3dp {

// Error taxonomy used across the library. The CLI maps kinds to exit codes.
enum class ErrorKind {
    Shape,       // tensor dimension mismatch
    Validity,    // non-finite values where finite required
    Contract,    // precondition violated by the caller
    Geometry,    // non-rigid transform, singular intrinsics, bad camera
    Reuse,       // backward on an already-consumed graph
    Sampling,    // no valid sample exists (e.g. episode too short)
    Generation,  // scene placement failed
    Dependency,  // required prior artifact missing
    Numerical,   // solver breakdown
    Parse,       // malformed config / file
    Io,          // filesystem failure
    Divergence,  // non-finite intermediate in an iterative process
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::Shape: return "shape";
        case ErrorKind::Validity: return "validity";
        case ErrorKind::Contract: return "contract";
        case ErrorKind::Geometry: return "geometry";
        case ErrorKind::Reuse: return "reuse";
        case ErrorKind::Sampling: return "sampling";
        case ErrorKind::Generation: return "generation";
        case ErrorKind::Dependency: return "dependency";
        case ErrorKind::Numerical: return "numerical";
        case ErrorKind::Parse: return "parse";
        case ErrorKind::Io: return "io";
        case ErrorKind::Divergence: return "divergence";
    }
    return "unknown";
}

[[noreturn]] inline void raise(ErrorKind kind, const std::string& msg) {
    throw Error(kind, std::string(error_kind_name(kind)) + " error: " + msg);
}

}  // namespace r3dp
