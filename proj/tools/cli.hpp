#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace deid::cli {

// Runs the `deid` command line with args[0] being the program name. Returns
// the process exit code: 0 ok, 1 runtime error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deid::cli
