// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace lipdistill {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.constant(p));
  return f(tape, vars).value().item();
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport finite_diff_check(const ScalarFn& f, std::vector<Tensor> params,
                                  const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("finite difference step must be > 0");

  const double base_a = evaluate(f, params);
  const double base_b = evaluate(f, params);
  if (std::memcmp(&base_a, &base_b, sizeof(double)) != 0) {
    throw std::runtime_error("gradient check: function is not deterministic");
  }

  std::vector<Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.leaf(p));
    ad::Var loss = f(tape, vars);
    if (loss.requires_grad()) {
      tape.backward(loss);
    }
    for (const ad::Var& v : vars) analytic.push_back(tape.gradient(v));
  }
  if (options.corrupt_analytic && !analytic.empty()) analytic.front()[0] += 1e-2;

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      params[p][i] = orig + options.step;
      const double up = evaluate(f, params);
      params[p][i] = orig - options.step;
      const double down = evaluate(f, params);
      params[p][i] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[p][i];
      report.max_rel_error = std::max(report.max_rel_error, relative_error(a, numeric));
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
      ++report.elements;
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

}  // namespace lipdistill
