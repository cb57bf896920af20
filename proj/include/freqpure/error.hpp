#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace freqpure {

/// Raised when an argument violates a documented precondition
/// (shape mismatch, non-finite data, out-of-range parameter).
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A model failed to train to its contract; carries the loss curve.
class TrainingFailure : public std::runtime_error {
public:
    TrainingFailure(const std::string& what, std::vector<double> curve)
        : std::runtime_error(what), loss_curve(std::move(curve)) {}
    std::vector<double> loss_curve;
};

/// External model or artifact could not be loaded.
class LoadError : public std::runtime_error {
public:
    LoadError(const std::string& path, const std::string& what)
        : std::runtime_error(path + ": " + what), path(path) {}
    std::string path;
};

/// A numerical component produced garbage (NaN/Inf) mid-computation.
class NumericalFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace freqpure
