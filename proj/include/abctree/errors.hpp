#pragma once

#include <stdexcept>
#include <string>

namespace abctree {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A parameter value fell outside the domain it must belong to.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Vectors of mismatched or invalid length.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A belief state or posterior that cannot be normalized (all-zero mass).
class DegenerateStateError : public Error {
public:
    using Error::Error;
};

class InvalidPriorError : public Error {
public:
    using Error::Error;
};

/// An iterative solver stopped before reaching its tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual)
        : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}

    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

/// Top-two resampling could not find a challenger within the attempt cap.
class ResampleExhaustedError : public Error {
public:
    using Error::Error;
};

/// SMC population whose effective sample size collapsed.
class DegeneratePopulationError : public Error {
public:
    using Error::Error;
};

/// Requested estimator is not usable at this dimensionality.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Failure of the forward model itself (bad output, dead or stuck child process).
class SimulatorError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public SimulatorError {
public:
    using SimulatorError::SimulatorError;
};

class SimulatorTimeoutError : public SimulatorError {
public:
    using SimulatorError::SimulatorError;
};

class ProcessError : public SimulatorError {
public:
    using SimulatorError::SimulatorError;
};

/// Reading or writing run artifacts failed.
class IoError : public Error {
public:
    using Error::Error;
};

/// Invalid experiment configuration; `path` names the offending field.
class ConfigError : public Error {
public:
    ConfigError(std::string path, const std::string& what)
        : Error(path + ": " + what), path_(std::move(path)) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

}  // namespace abctree
