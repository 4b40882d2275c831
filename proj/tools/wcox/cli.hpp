#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace wcox::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kValidation = 2, kNonconvergence = 3, kStudyAborted = 4 };

/// Runs the command line `args` (args[0] is the program name). Results go
/// to `out` unless redirected to files by flags; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wcox::cli
