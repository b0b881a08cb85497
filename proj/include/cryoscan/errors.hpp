#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cryoscan {

// Base of every error the library raises. Validation errors map to CLI exit
// code 2, everything else to 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual bool is_validation() const noexcept { return false; }
};

// Bad input: out-of-range values, schema violations, malformed files.
class ValidationError : public Error {
public:
    using Error::Error;
    bool is_validation() const noexcept override { return true; }
};

class ParseError : public ValidationError {
public:
    ParseError(std::string source, std::size_t line, std::size_t column, const std::string& what)
        : ValidationError(source + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + what),
          source_(std::move(source)), line_(line), column_(column) {}

    const std::string& source() const noexcept { return source_; }
    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::string source_;
    std::size_t line_;
    std::size_t column_;
};

// Target lies inside a configured instability region.
class InterlockError : public Error {
public:
    using Error::Error;
};

// A ray left the optical train (grazing surface, missed aperture or plane).
class MissError : public Error {
public:
    using Error::Error;
};

// Spot or curve fit could not produce a trustworthy answer.
class FitError : public Error {
public:
    using Error::Error;
};

// Mapping calibration rejected: degenerate correspondences or residual gate.
class CalibrationError : public Error {
public:
    using Error::Error;
};

// Requested physical target is outside the reachable image of [-1,1]^2.
class OutOfRangeError : public Error {
public:
    OutOfRangeError(const std::string& what, double nearest_vx, double nearest_vy)
        : Error(what), nearest_vx_(nearest_vx), nearest_vy_(nearest_vy) {}
    double nearest_vx() const noexcept { return nearest_vx_; }
    double nearest_vy() const noexcept { return nearest_vy_; }

private:
    double nearest_vx_;
    double nearest_vy_;
};

// Session is scanning or otherwise not able to accept the command.
class BusyError : public Error {
public:
    using Error::Error;
};

// Operation not valid in the current state (e.g. uncalibrated physical steer).
class StateError : public Error {
public:
    using Error::Error;
};

}  // namespace cryoscan
