#pragma once

#include <iosfwd>

namespace supportaff {

/// Command-line entry point. Returns 0 on success, 2 for usage errors and 1
/// for runtime failures.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace supportaff
