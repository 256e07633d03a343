#pragma once

#include <stdexcept>
#include <string>

namespace retrocede {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
  using Error::Error;
};

/// Operation not defined for the given model kind.
class UnsupportedOperation : public Error {
public:
  using Error::Error;
};

/// Moment vector outside the closure of the moment manifold.
class InvalidMoment : public DomainError {
public:
  using DomainError::DomainError;
};

/// An expectation that does not converge when the truncation is relaxed.
class IntegrabilityError : public Error {
public:
  using Error::Error;
};

class QuadratureError : public Error {
public:
  using Error::Error;
};

/// Iterative method failed to converge within its budget.
class NumericError : public Error {
public:
  using Error::Error;
};

class SolverStall : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

} // namespace retrocede
