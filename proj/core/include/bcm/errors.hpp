#pragma once

#include <stdexcept>
#include <string>

namespace bcm {

// Scenario/prior/method configuration problems (CLI exit code 2).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or invariant-violating trial data (CLI exit code 3).
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An imputation model cannot be estimated from the available data
// (CLI exit code 4).
struct non_estimable_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure: singular blocks, non-finite densities, failed
// optimizations (CLI exit code 5).
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace bcm
