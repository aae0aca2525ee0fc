// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lipdistill/autodiff.hpp"

namespace lipdistill {

/// Builds a scalar loss on the given tape from the tracked parameters.
using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Test hook: perturb the first analytic gradient element before comparing.
  bool corrupt_analytic = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t elements = 0;
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, 1e-5). The floor keeps near-zero gradients from
/// turning central-difference roundoff into large ratios.
double relative_error(double analytic, double numeric);

/// Compares tape gradients of f against central differences over every element
/// of every parameter. Throws std::runtime_error when two forward passes at the
/// same point disagree.
GradCheckReport finite_diff_check(const ScalarFn& f, std::vector<Tensor> params,
                                  const GradCheckOptions& options = {});

}  // namespace lipdistill
