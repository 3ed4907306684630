#pragma once

#include <stdexcept>

namespace mmfm {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct LengthError : std::length_error {
  using std::length_error::length_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MeasurementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mmfm
