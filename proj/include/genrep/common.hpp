// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace genrep {

// Shape or width mismatch between tensors/layers.
struct DimError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid static configuration (sizes, grids, target patterns).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Runtime contract violation (empty input, missing state, non-finite value).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// When enabled, every op scans its output and throws ContractError on NaN/Inf.
bool check_finite_enabled();
void set_check_finite(bool on);

} // namespace genrep
