#pragma once

#include <stdexcept>
#include <string>

namespace streambp {

// Operand shapes disagree, or a row range falls outside its matrix.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Softmax row with no unmasked entry.
class DegenerateRowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Argument outside the mathematical domain of an operation (D = 0, eps <= 0, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Memory meter went negative or an engine leaked activations. Always a bug.
class AccountingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Loss or gradient became non-finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Size guard tripped (oracle size cap, activation byte budget).
class ResourceGuardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or invalid experiment configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace streambp
