#pragma once

#include <stdexcept>
#include <string>

namespace ssmcyto {

// Violated precondition: bad shapes, out-of-range labels, broken invariants.
// The CLI maps this family to exit code 1.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Filesystem and serialization failures. The CLI maps these to exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace ssmcyto
