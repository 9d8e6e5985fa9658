#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace trajectwin::cli {

inline constexpr std::string_view kVersion = "0.1.0";

// Exit codes: 0 success, 1 usage, 2 data or schema, 3 numeric failure.
// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace trajectwin::cli
