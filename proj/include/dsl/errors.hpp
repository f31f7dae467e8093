#pragma once

#include <stdexcept>
#include <string>

namespace dsl {

// Numerical failure modes surfaced to callers. Training code treats the
// per-sample ones (NoEventDetected, BracketFailure, SingularJacobian) as
// skippable; everything else indicates a programming or configuration error.

struct StepSizeUnderflow : std::runtime_error {
    explicit StepSizeUnderflow(const std::string& what) : std::runtime_error(what) {}
};

struct MaxStepsExceeded : std::runtime_error {
    explicit MaxStepsExceeded(const std::string& what) : std::runtime_error(what) {}
};

struct NoEventDetected : std::runtime_error {
    explicit NoEventDetected(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeMismatch : std::logic_error {
    explicit ShapeMismatch(const std::string& what) : std::logic_error(what) {}
};

struct BracketFailure : std::runtime_error {
    explicit BracketFailure(const std::string& what) : std::runtime_error(what) {}
};

struct SingularJacobian : std::runtime_error {
    double condition_estimate;
    explicit SingularJacobian(const std::string& what, double cond = 0.0)
        : std::runtime_error(what), condition_estimate(cond) {}
};

struct StartOnBoundary : std::runtime_error {
    explicit StartOnBoundary(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainingAborted : std::runtime_error {
    explicit TrainingAborted(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dsl
