#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace combemb::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFile = 3;
inline constexpr int kExitNumeric = 4;

/// Runs one pipeline verb. Results go to `out` as JSON, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv);

}  // namespace combemb::cli
