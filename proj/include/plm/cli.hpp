#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace plm {

/// Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
enum ExitCode : int { kExitOk = 0, kExitInvalid = 1, kExitRuntime = 2 };

/// Runs one command line (without the program name). Results go to `out`,
/// progress and diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace plm
