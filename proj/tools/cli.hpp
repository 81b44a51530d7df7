#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace detkit::cli {

// Exit codes.
constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

// Entry point shared by the `detkit` binary and the tests. argv[0] is the
// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace detkit::cli
