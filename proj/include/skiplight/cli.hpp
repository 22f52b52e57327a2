#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace skiplight {

/// Runs one command line (program name excluded). Exit status: 0 success,
/// 1 usage error, 2 data error.
int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli(int argc, const char* const* argv);

}  // namespace skiplight
