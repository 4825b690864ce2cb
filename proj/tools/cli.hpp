#pragma once

#include <iosfwd>

namespace lrlab::cli {

// Runs the lrlab command line. Returns the process exit code: 0 on success,
// 1 for validation, configuration, format and I/O errors, 2 for numeric
// failures (including a failing `verify` check).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lrlab::cli
