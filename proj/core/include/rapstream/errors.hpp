#ifndef RAPSTREAM_ERRORS_HPP
#define RAPSTREAM_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace rapstream {

// Base for everything this library throws on purpose. CLI maps these to
// exit code 1; anything else is a bug.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/matrix dimensions do not match the operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Argument outside the operation's declared domain (bands, ranges, probabilities).
class DomainError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// Iterative routine failed to converge or produced a degenerate result.
class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg, double residual = 0.0)
        : Error(msg), residual_(residual) {}
    double residual() const { return residual_; }

private:
    double residual_;
};

// Malformed file contents; carries the offending path and byte offset.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::string path, std::size_t byte_offset)
        : Error(msg + " (" + path + " @ byte " + std::to_string(byte_offset) + ")"),
          path_(std::move(path)),
          byte_offset_(byte_offset) {}
    const std::string& path() const { return path_; }
    std::size_t byte_offset() const { return byte_offset_; }

private:
    std::string path_;
    std::size_t byte_offset_;
};

// Invalid run/session configuration (empty splits, missing classes, bad modes).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Online task requirements cannot be met by the given sampling geometry.
class IncompatibleTaskError : public Error {
public:
    using Error::Error;
};

// Backward called with a cache that no longer matches the model state.
class InvalidStateError : public Error {
public:
    using Error::Error;
};

// Optimizer saw a non-finite gradient; carries the parameter name.
class TrainingDivergedError : public Error {
public:
    explicit TrainingDivergedError(const std::string& parameter)
        : Error("non-finite gradient for parameter '" + parameter + "'"),
          parameter_(parameter) {}
    const std::string& parameter() const { return parameter_; }

private:
    std::string parameter_;
};

}  // namespace rapstream

#endif
