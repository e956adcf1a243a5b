// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: prep, synth, train, eval, diagnose, sweep.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace duorec::cli {

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace duorec::cli
