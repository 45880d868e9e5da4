#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace aerolite::cli {

/// Runs one `aerolite` command line (args[0] is the program name) and
/// returns the process exit code: 0 ok, 2 validation, 3 transport,
/// 4 numeric.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aerolite::cli
