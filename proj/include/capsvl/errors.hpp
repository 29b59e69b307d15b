#pragma once

#include <stdexcept>
#include <string>

namespace capsvl {

/// Invalid or inconsistent configuration (dimension mismatch, bad layer counts).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed user input (out-of-vocabulary ids, out-of-range positions, bad boxes).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values produced during a numerical procedure.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure to read a file or a record (manifest, checkpoint, blob).
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unsatisfiable synthetic-data request (e.g. objects that cannot be placed).
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace capsvl
