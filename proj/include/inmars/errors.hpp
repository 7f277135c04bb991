#pragma once

#include <stdexcept>
#include <string>

namespace inmars {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required input file is missing or unreadable.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Input data violates its contract (e.g. label outside the merge map).
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Empty batch, all regions dropped, zero-count confusion matrix, ...
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values during optimisation (CLI exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage ran before the artifact it depends on exists (CLI exit code 3).
class MissingPrerequisite : public Error {
 public:
  using Error::Error;
};

}  // namespace inmars
