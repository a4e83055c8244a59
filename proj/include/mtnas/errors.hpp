#pragma once

#include <stdexcept>
#include <string>

namespace mtnas {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArgumentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PersistenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConstraintError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mtnas
