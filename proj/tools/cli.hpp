#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace rohydr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

// Runs one command. `args` excludes the program name. Normal output goes to
// `out`, log lines and errors to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rohydr::cli
