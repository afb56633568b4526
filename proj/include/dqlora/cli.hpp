// SPDX-License-Identifier: Apache-2.0
//
// dqlora <datagen|train|evaluate|report> [options]
//
// Exit codes: 0 ok, 1 usage, 2 data or config error, 3 numeric failure.
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dqlora {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dqlora
