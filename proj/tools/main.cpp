// SPDX-License-Identifier: Apache-2.0

#include "flowcast/cli.hpp"

int main(int argc, char** argv) { return flowcast::run_cli(argc, argv); }
