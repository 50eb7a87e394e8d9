#pragma once

#include <stdexcept>
#include <string>

namespace meanstop {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inputs that do not fit together (mismatched grids, wrong table sizes, malformed files).
class StructuralError : public Error {
public:
    using Error::Error;
};

/// Inputs outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Problem size exceeds what an exact algorithm or memory budget allows.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// Invalid tuning parameter.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Model lacks the structure an operation requires.
class UnsupportedModelError : public Error {
public:
    using Error::Error;
};

/// Numerical breakdown (NaN, negative mass, Newton failure).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Time step too large for the explicit part of a scheme.
class CflError : public Error {
public:
    CflError(const std::string& what, int suggested_steps)
        : Error(what), suggested_n_steps(suggested_steps) {}
    int suggested_n_steps;
};

}  // namespace meanstop
