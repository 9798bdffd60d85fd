#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dhat::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kCheckpointError = 3,
  kNumericError = 4,
};

/// Runs one command line (args[0] is the verb) and returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dhat::cli
