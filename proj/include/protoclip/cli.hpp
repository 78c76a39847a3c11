#pragma once

#include <ostream>

namespace protoclip {

/// Entry point of the `protoclip` command. Returns the process exit code:
/// 0 success, 1 contract or configuration error, 2 I/O error.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace protoclip
