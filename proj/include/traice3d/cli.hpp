#pragma once

#include <ostream>

namespace traice3d {

/// Entry point of the traice3d command line. Returns 0 on success, 1 on a
/// runtime failure and 2 on a usage or configuration error; failures print
/// one line to `err`.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace traice3d
