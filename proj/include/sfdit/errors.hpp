#pragma once

#include <stdexcept>
#include <string>

namespace sfdit {

// Shape or rank disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller violated a documented precondition (e.g. non-scalar grad_check output).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Argument outside the mathematical domain of an operation.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Invalid model / training / geometry configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed dataset or checkpoint file.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training diverged (non-finite loss).
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sfdit
