// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0
//
// `mosld` command-line entry point.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mosld {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitMissingArtifact = 3;
inline constexpr int kExitNumerical = 4;

/// Runs one invocation; args excludes the program name. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace mosld
