#pragma once

#include <iosfwd>

namespace gsedit::cli {

/// Entry point of the gsedit command line. Returns 0 on success, 1 on a
/// failure (reported as "error: <stage>: <message>"), 2 on invalid usage.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gsedit::cli
