#pragma once

namespace cerag {

// Parses argv, dispatches the subcommand, returns the process exit code for
// the success and usage-error paths. Runtime errors propagate as exceptions.
int run_app(int argc, char** argv);

}  // namespace cerag
