#pragma once

// Command-line front end: gen-data, train, eval, eval-hat, inspect-capsules.

#include <iosfwd>

namespace capsvl::cli {

/// Exit codes.
inline constexpr int kOk = 0, kRuntimeFailure = 1, kUsageError = 2;

/// Parses and runs one command. Messages go to `out` and `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace capsvl::cli
