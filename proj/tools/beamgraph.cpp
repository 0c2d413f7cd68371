// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "beamgraph/expcli.hpp"

int main(int argc, char** argv) { return beamgraph::cli::run_cli(argc, argv, std::cout, std::cerr); }
