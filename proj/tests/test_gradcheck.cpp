#include <doctest.h>

#include <atomic>
#include <set>

#include "lipdistill/gradcheck.hpp"
#include "lipdistill/gradcheck_suite.hpp"
#include "lipdistill/losses.hpp"
#include "test_util.hpp"

using namespace lipdistill;
namespace ad = lipdistill::ad;

TEST_CASE("x squared at 1") {
  const auto r = finite_diff_check(
      [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::sum_all(ad::mul(v[0], v[0])); },
      {Tensor::scalar(1.0)});
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-10);
  CHECK(r.elements == 1);
}

TEST_CASE("a constant function has zero gradients on both sides") {
  const auto r = finite_diff_check(
      [](ad::Tape& t, const std::vector<ad::Var>& v) {
        return ad::add(ad::scale(ad::sum_all(v[0]), 0.0), t.constant(Tensor::scalar(4.0)));
      },
      {Tensor::vector({0.3, -0.7})});
  CHECK(r.passed);
  CHECK(r.max_abs_error == 0.0);
}

TEST_CASE("label-smoothed cross-entropy of random logits passes") {
  Rng rng = derive_stream(12, {});
  const Tensor target = loss::SmoothedTarget::make(6, 2, 0.1).distribution;
  const auto r = finite_diff_check(
      [&](ad::Tape&, const std::vector<ad::Var>& v) { return loss::label_smoothed_ce(v[0], target); },
      {testutil::random_tensor({6}, rng)});
  CHECK(r.passed);
}

TEST_CASE("a corrupted analytic gradient is caught") {
  GradCheckOptions opts;
  opts.corrupt_analytic = true;
  const auto r = finite_diff_check(
      [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::sum_all(ad::mul(v[0], v[0])); },
      {Tensor::vector({0.5, 1.0})}, opts);
  CHECK_FALSE(r.passed);
}

TEST_CASE("a function that changes between calls is rejected") {
  std::atomic<int> calls{0};
  CHECK_THROWS_AS(finite_diff_check(
                      [&](ad::Tape& t, const std::vector<ad::Var>& v) {
                        return ad::add(ad::sum_all(v[0]), t.constant(Tensor::scalar(++calls)));
                      },
                      {Tensor::vector({1.0})}),
                  std::runtime_error);
}

TEST_CASE("relative error uses the floor for tiny gradients") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-4));
}

TEST_CASE("the component suite covers every layer and loss and passes on three seeds") {
  const auto names = gradcheck_components();
  CHECK(names.size() >= 10);
  const std::set<std::string> have(names.begin(), names.end());
  for (const char* must : {"linear", "gru_cell", "bigru", "se_block", "residual_block2d",
                           "residual_block1d", "visual_frontend", "audio_frontend",
                           "classifier_head", "label_smoothed_ce", "seq_kd", "frame_kd",
                           "alignment", "student_objective", "teacher_objective"}) {
    CHECK(have.count(must) == 1);
  }
  const auto results = run_gradcheck_suite({1, 2, 3}, {});
  CHECK(results.size() == 3 * names.size());
  for (const auto& r : results) {
    CAPTURE(r.name);
    CAPTURE(r.seed);
    CHECK(r.report.passed);
    CHECK(r.report.max_rel_error < 1e-4);
  }
}

TEST_CASE("the suite reports failures under the fault hook and rejects unknown names") {
  GradCheckOptions opts;
  opts.corrupt_analytic = true;
  const auto results = run_gradcheck_suite({1}, opts, {"linear"});
  REQUIRE(results.size() == 1);
  CHECK_FALSE(results[0].report.passed);
  CHECK_THROWS_AS(run_gradcheck_suite({1}, {}, {"no_such_layer"}), std::invalid_argument);
}
