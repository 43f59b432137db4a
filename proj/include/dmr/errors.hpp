#pragma once

#include <stdexcept>

namespace dmr {

// Error taxonomy. The CLI maps these to exit codes:
// config/shape (usage) -> 2, numeric divergence -> 3.
struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct state_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dmr
