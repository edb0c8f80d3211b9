#pragma once

#include <stdexcept>
#include <string>

namespace rrt {

// Base of all library errors. The CLI maps subtypes to exit codes:
// IoError -> 1, everything else (validation-like) -> 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes incompatible with an operation.
struct ShapeError : Error {
    using Error::Error;
};

// A scalar argument out of range (rank too large, zero blocks, empty input...).
struct ArgumentError : Error {
    using Error::Error;
};

// A named field of a config / manifest / record violates an invariant.
struct ValidationError : Error {
    ValidationError(const std::string& field, const std::string& what)
        : Error(field + ": " + what), field_(field) {}
    const std::string& field() const { return field_; }

  private:
    std::string field_;
};

// An iterative algorithm failed to converge within its cap.
struct ConvergenceError : Error {
    ConvergenceError(const std::string& what, double residual)
        : Error(what), residual_(residual) {}
    double residual() const { return residual_; }

  private:
    double residual_;
};

// Filesystem / stream failure (missing file, short write...).
struct IoError : Error {
    using Error::Error;
};

// Structurally broken checkpoint. Each failure mode is a distinct code so
// callers (and tests) can tell them apart.
struct CheckpointError : Error {
    enum class Code {
        bad_magic,
        bad_version,
        bad_header,
        truncated,
        overlapping_regions,
        non_finite_payload,
    };

    CheckpointError(Code code, const std::string& what) : Error(what), code_(code) {}
    Code code() const { return code_; }

  private:
    Code code_;
};

}  // namespace rrt
