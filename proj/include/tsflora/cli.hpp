#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tsflora {

/// Entry point of the `tsflora` tool. `args` excludes the program name.
/// Returns 0 on success; on failure writes one line
/// `error kind=<kind> [key=<key>|reason=<reason>] msg="<text>"` to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tsflora
