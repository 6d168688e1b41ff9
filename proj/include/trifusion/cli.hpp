#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace trifusion::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kIntegrity = 3 };

// Runs one command line (without the program name). Normal output goes to
// `out`, diagnostics to `err`; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace trifusion::cli
