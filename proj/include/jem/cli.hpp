#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace jem {

inline constexpr const char* kToolVersion = "0.1.0";

// Entry point behind the `jem` binary. args excludes the program name.
// Returns 0 on success, 2 on usage/config errors, 1 on runtime failures;
// errors are reported on err as `error: <kind>: <message>`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace jem
