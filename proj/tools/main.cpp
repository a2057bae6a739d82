// Copyright 2026 The grid4d-desk Authors
// SPDX-License-Identifier: Apache-2.0
#include "grid4d/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return grid4d::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
