#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace btok::cli {

enum ExitCode : int {
  ok = 0,
  failure = 1,
  config_error = 2,
  numerical_error = 3,
  verification_failed = 4,
  format_error = 5,
};

// Environment variable naming the parent of run directories when --out is absent.
inline constexpr const char* kOutRootEnv = "BTOK_OUT_ROOT";

// Parses `args` (without the program name) and runs one subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace btok::cli
