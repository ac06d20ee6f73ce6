#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mitdet {

/// Entry point of the `mitdet` tool. Returns 0 on success, 2 on a usage
/// error and 1 when a subcommand fails at runtime.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mitdet
