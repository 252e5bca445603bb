// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace flowcast {

// Full command-line entry point; returns the process exit code.
// 0 = success, 2 = configuration/data/checkpoint errors, 3 = training
// divergence.
int run_cli(int argc, const char* const* argv);

}  // namespace flowcast
