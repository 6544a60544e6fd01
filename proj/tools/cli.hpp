#pragma once
// Command-line front end; shared by the `laser` binary and the Python module.

namespace laser::cli {

// argv[0] is the program name. Returns the process exit code.
int run(int argc, char** argv);

}  // namespace laser::cli
