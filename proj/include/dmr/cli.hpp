#pragma once

// Command-line entry points. Exit codes: 0 success, 1 gradcheck failure,
// 2 usage/config error, 3 numeric divergence.

#include <string>
#include <vector>

namespace dmr {

int run_cli(const std::vector<std::string>& args);

}  // namespace dmr
