#pragma once

#include <string>
#include <vector>

namespace trail::cli {

// Full command-line entry point. Exit codes: 0 success, 2 config/usage
// error, 3 runtime error.
int run(int argc, const char* const* argv);

// Convenience wrapper for tests.
int run_args(const std::vector<std::string>& args);

}  // namespace trail::cli
