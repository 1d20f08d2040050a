#pragma once

#include <iosfwd>

namespace cprobe::cli {

enum ExitCode { ok = 0, failure = 1, config_error = 2, corrupt_checkpoint = 3, diverged = 4 };

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cprobe::cli
