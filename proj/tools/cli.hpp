#pragma once

#include <ostream>

namespace fgss::cli {

/// Exit codes: 0 success, 1 usage error, 2 runtime failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fgss::cli
