#pragma once

#include <stdexcept>
#include <string>

namespace ivdiff {

/// Base for every error raised by the library. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class GraphError : public Error {
public:
    using Error::Error;
};

/// Input data that cannot produce a meaningful result (empty series, vanishing weights, ...).
class InputError : public Error {
public:
    using Error::Error;
};

/// Non-finite values encountered while training or sampling.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace ivdiff
