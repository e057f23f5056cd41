// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/cli.hpp"

int main(int argc, char** argv) { return mosld::run_cli(argc, argv); }
