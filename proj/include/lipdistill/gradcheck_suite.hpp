// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks over every layer and loss, on tiny shapes.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lipdistill/gradcheck.hpp"

namespace lipdistill {

struct ComponentResult {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckReport report;
};

std::vector<std::string> gradcheck_components();

/// Runs each named component (all when `only` is empty) once per seed.
std::vector<ComponentResult> run_gradcheck_suite(const std::vector<std::uint64_t>& seeds,
                                                 const GradCheckOptions& options,
                                                 const std::vector<std::string>& only = {});

}  // namespace lipdistill
