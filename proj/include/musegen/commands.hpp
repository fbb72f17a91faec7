#pragma once

#include <string>
#include <vector>

namespace musegen {

// Full CLI entry point; returns the process exit code.
// 0 ok, 2 usage, 3 validation, 4 missing artifact / format / io, 5 numeric.
int run_command(const std::vector<std::string>& args);

}  // namespace musegen
