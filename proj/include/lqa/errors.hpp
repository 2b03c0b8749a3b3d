#pragma once

#include <stdexcept>
#include <string>

namespace lqa {

// One exception type per failure family; the CLI maps them to exit codes.

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GeometryError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StructureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lqa
