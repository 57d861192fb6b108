#pragma once

// nnscene command-line entry point. Exit codes: 0 success, 2 usage or
// configuration error, 1 runtime error.

#include <ostream>
#include <string>
#include <vector>

namespace nnscene::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nnscene::cli
