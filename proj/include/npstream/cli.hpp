#pragma once

#include <string>
#include <vector>

namespace npstream {

// Entry point behind the npstream binary. args excludes the program name.
// Returns 0 on success, 1 on validation/usage errors, 2 on numerical failure.
int run_command(const std::vector<std::string>& args);

}  // namespace npstream
