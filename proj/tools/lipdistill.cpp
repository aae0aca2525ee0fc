// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "lipdistill/cli.hpp"

int main(int argc, char** argv) {
  return lipdistill::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
