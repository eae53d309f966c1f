#pragma once

namespace modality::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kValidation = 2,
  kNotConverged = 3,
  kIo = 4,
};

// Parses the command line, runs the subcommand and maps errors to exit codes.
int run(int argc, char** argv);

}  // namespace modality::cli
