#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lipdistill/alignment.hpp"
#include "lipdistill/losses.hpp"
#include "lipdistill/nn/models.hpp"
#include "test_util.hpp"

using namespace lipdistill;
namespace ad = lipdistill::ad;
using loss::SmoothedTarget;

namespace {

// Cross-entropy evaluated directly from its definition.
double reference_ce(const Tensor& logits, const Tensor& q) {
  double m = logits[0];
  for (double v : logits.data()) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - m);
  double out = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) out -= q[i] * (logits[i] - m - std::log(z));
  return out;
}

double ce(const Tensor& logits, const Tensor& q) {
  ad::Tape t;
  return loss::label_smoothed_ce(t.constant(logits), q).value().item();
}

}  // namespace

TEST_CASE("smoothed targets") {
  const auto q = SmoothedTarget::make(500, 7, 0.1).distribution;
  CHECK(std::abs(q[0] - 0.0002) < 1e-15);
  CHECK(std::abs(q[7] - 0.9002) < 1e-15);
  const auto one_hot = SmoothedTarget::make(5, 2, 0.0).distribution;
  CHECK(one_hot == Tensor::vector({0, 0, 1, 0, 0}));
  for (std::size_t n : {2ul, 3ul, 20ul, 500ul}) {
    for (double eps : {0.0, 0.05, 0.1, 0.5, 0.99}) {
      const auto d = SmoothedTarget::make(n, n - 1, eps).distribution;
      double s = 0.0;
      for (double v : d.data()) s += v;
      CHECK(std::abs(s - 1.0) < 1e-12);
      CHECK(d[0] == eps / double(n));
    }
  }
  CHECK_THROWS(SmoothedTarget::make(1, 0, 0.1));
  CHECK_THROWS(SmoothedTarget::make(5, 5, 0.1));
  CHECK_THROWS(SmoothedTarget::make(5, 0, 1.0));
}

TEST_CASE("cross-entropy: one-hot equivalence, uniform logits, batch mean") {
  Rng rng = derive_stream(1, {});
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor logits = testutil::random_tensor({20}, rng, -5, 5);
    const std::size_t y = static_cast<std::size_t>(uniform_int(rng, 0, 19));
    // ε = 0 is the plain negative log-likelihood of the label
    double m = logits[0];
    for (double v : logits.data()) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits.data()) z += std::exp(v - m);
    const double nll = -(logits[y] - m - std::log(z));
    CHECK(std::abs(ce(logits, SmoothedTarget::make(20, y, 0.0).distribution) - nll) < 1e-12);
    const Tensor q = SmoothedTarget::make(20, y, 0.1).distribution;
    CHECK(std::abs(ce(logits, q) - reference_ce(logits, q)) < 1e-12);
  }
  Tensor any({7}, 0.0);
  any[2] = 0.25;
  any[5] = 0.75;
  CHECK(std::abs(ce(Tensor({7}, 3.0), any) - std::log(7.0)) < 1e-12);

  const Tensor batch = testutil::random_tensor({3, 4}, rng);
  Tensor targets({3, 4});
  double mean = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    const Tensor q = SmoothedTarget::make(4, b, 0.1).distribution;
    Tensor row({4});
    for (std::size_t i = 0; i < 4; ++i) {
      targets.at(b, i) = q[i];
      row[i] = batch.at(b, i);
    }
    mean += reference_ce(row, q) / 3.0;
  }
  CHECK(std::abs(ce(batch, targets) - mean) < 1e-12);
  CHECK_THROWS(ce(batch, Tensor({3, 5})));
}

TEST_CASE("target mixing equals loss mixing") {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    Rng rng = derive_stream(seed, {2});
    const Tensor logits = testutil::random_tensor({10}, rng, -4, 4);
    const auto qa = SmoothedTarget::make(10, 1, 0.1);
    const auto qb = SmoothedTarget::make(10, 6, 0.1);
    for (double lam : {0.0, 0.2, 0.5, 0.93, 1.0}) {
      const double mixed = ce(logits, SmoothedTarget::mix(qa, qb, lam).distribution);
      const double split = lam * ce(logits, qa.distribution) + (1 - lam) * ce(logits, qb.distribution);
      CHECK(std::abs(mixed - split) < 1e-12);
    }
  }
}

TEST_CASE("mixup examples") {
  Rng rng = derive_stream(3, {});
  loss::MixupExample a{testutil::random_tensor({2, 1, 3, 3}, rng), testutil::random_tensor({4, 2}, rng),
                       SmoothedTarget::make(3, 0, 0.1).distribution};
  loss::MixupExample b{testutil::random_tensor({2, 1, 3, 3}, rng), testutil::random_tensor({4, 2}, rng),
                       SmoothedTarget::make(3, 2, 0.1).distribution};
  const auto one = loss::mixup_batch({a}, {b}, 1.0)[0];
  CHECK(bitwise_equal(one.visual, a.visual));
  CHECK(bitwise_equal(one.audio, a.audio));
  CHECK(bitwise_equal(one.target, a.target));
  const auto zero = loss::mixup_batch({a}, {b}, 0.0)[0];
  CHECK(bitwise_equal(zero.visual, b.visual));
  CHECK(bitwise_equal(zero.audio, b.audio));
  CHECK(bitwise_equal(zero.target, b.target));
  CHECK(loss::mix(Tensor({3}, 0.0), Tensor({3}, 2.0), 0.5) == Tensor({3}, 1.0));

  // both modalities and the target share λ
  const auto half = loss::mixup_batch({a}, {b}, 0.3)[0];
  for (std::size_t i = 0; i < a.audio.size(); ++i) CHECK(half.audio[i] == 0.3 * a.audio[i] + 0.7 * b.audio[i]);
  for (std::size_t i = 0; i < a.visual.size(); ++i) CHECK(half.visual[i] == 0.3 * a.visual[i] + 0.7 * b.visual[i]);
  CHECK(std::abs(half.target[0] - (0.3 * a.target[0] + 0.7 * b.target[0])) < 1e-15);

  CHECK_THROWS(loss::mix(a.audio, b.audio, 1.01));
  CHECK_THROWS(loss::mix(a.audio, b.audio, -0.1));
  CHECK_THROWS(loss::mix(a.audio, a.visual, 0.5));
  CHECK_THROWS(loss::mixup_batch({a}, {a, b}, 0.5));

  Rng draw = derive_stream(4, {});
  for (int i = 0; i < 200; ++i) {
    const double lam = loss::sample_mixup_lambda(draw, 0.2);
    CHECK(lam >= 0.0);
    CHECK(lam <= 1.0);
  }
  CHECK_THROWS(loss::sample_mixup_lambda(draw, 0.0));
}

TEST_CASE("sequence-level distance") {
  ad::Tape t;
  auto kd1 = [&](const Tensor& a, const Tensor& v) { return loss::seq_kd_loss(a, t.constant(v)).value().item(); };
  CHECK(kd1(Tensor::vector({1, 2}), Tensor::vector({0, 0})) == 5.0);
  Rng rng = derive_stream(5, {});
  const Tensor a = testutil::random_tensor({6}, rng), v = testutil::random_tensor({6}, rng);
  CHECK(kd1(a, a) == 0.0);
  CHECK(kd1(a, v) > 0.0);
  Tensor a3 = a, v3 = v;
  for (double& x : a3.data()) x *= 3.0;
  for (double& x : v3.data()) x *= 3.0;
  CHECK(std::abs(kd1(a3, v3) - 9.0 * kd1(a, v)) < 1e-12);
  // batch mean over rows
  const Tensor ab = testutil::random_tensor({4, 6}, rng), vb = testutil::random_tensor({4, 6}, rng);
  double mean = 0.0;
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t d = 0; d < 6; ++d) mean += std::pow(ab.at(b, d) - vb.at(b, d), 2) / 4.0;
  CHECK(std::abs(kd1(ab, vb) - mean) < 1e-12);
  CHECK_THROWS(kd1(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})));
}

TEST_CASE("frame-level distance") {
  ad::Tape t;
  auto kd2 = [&](const Tensor& v, const Tensor& a) { return loss::frame_kd_loss(t.constant(v), a).value().item(); };
  CHECK(kd2(Tensor::matrix({{1, 0}, {0, 1}}), Tensor({2, 2})) == 1.0);
  Rng rng = derive_stream(6, {});
  const Tensor v = testutil::random_tensor({5, 3}, rng), a = testutil::random_tensor({5, 3}, rng);
  CHECK(kd2(v, v) == 0.0);
  CHECK(kd2(v, a) > 0.0);
  // permuting frames identically on both sides changes nothing
  Tensor vp({5, 3}), ap({5, 3});
  const std::size_t perm[5] = {3, 0, 4, 1, 2};
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t d = 0; d < 3; ++d) {
      vp.at(j, d) = v.at(perm[j], d);
      ap.at(j, d) = a.at(perm[j], d);
    }
  CHECK(std::abs(kd2(vp, ap) - kd2(v, a)) < 1e-12);
  // rank 3 averages over the batch as well
  Tensor vb({2, 5, 3}), ab({2, 5, 3});
  for (std::size_t i = 0; i < 15; ++i) {
    vb[i] = v[i];
    ab[i] = a[i];
    vb[15 + i] = a[i];
    ab[15 + i] = a[i];
  }
  CHECK(std::abs(kd2(vb, ab) - kd2(v, a) / 2.0) < 1e-12);
  CHECK_THROWS(kd2(v, Tensor({4, 3})));
}

TEST_CASE("teacher side is detached") {
  Rng rng = derive_stream(7, {});
  ad::Tape t;
  const ad::Var teacher = t.leaf(testutil::random_tensor({4}, rng));
  const ad::Var student = t.leaf(testutil::random_tensor({4}, rng));
  t.backward(loss::seq_kd_loss(teacher.value(), student));
  CHECK(t.gradient(teacher) == Tensor({4}, 0.0));
  const Tensor g = t.gradient(student);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(g[i] - 2.0 * (student.value()[i] - teacher.value()[i])) < 1e-14);
  }
}

TEST_CASE("total loss composition") {
  loss::DistillConfig cfg;
  cfg.kd1_enabled = cfg.kd2_enabled = true;
  CHECK(loss::total_loss(1.0, 0.5, 0.1, cfg) == 3.0);
  CHECK(loss::total_loss(0.0, 0.0, 0.0, cfg) == 0.0);
  ad::Tape t;
  const ad::Var total = loss::total_loss(t.constant(Tensor::scalar(1.0)), t.constant(Tensor::scalar(0.5)),
                                         t.constant(Tensor::scalar(0.1)), cfg);
  CHECK(total.value().item() == 3.0);
  CHECK(loss::total_loss(t.constant(Tensor::scalar(1.25)), std::nullopt, std::nullopt, cfg).value().item() == 1.25);

  loss::DistillConfig zero = cfg;
  zero.lambda1 = zero.lambda2 = 0.0;
  CHECK(loss::total_loss(1.7, 0.4, 0.9, zero) == 1.7);
  // linear in λ2 with slope L_KD2
  for (double l2 : {0.0, 1.0, 2.5, 10.0}) {
    loss::DistillConfig c = cfg;
    c.lambda2 = l2;
    CHECK(std::abs(loss::total_loss(1.0, 0.5, 0.1, c) - (2.0 + 0.1 * l2)) < 1e-15);
  }
}

TEST_CASE("distill config validation") {
  loss::DistillConfig c;
  CHECK_NOTHROW(c.validate());
  c.lambda1 = -1.0;
  CHECK_THROWS(c.validate());
  c = {};
  c.epsilon = 1.0;
  CHECK_THROWS(c.validate());
  c = {};
  c.mixup_enabled = true;
  c.mixup_alpha = 0.0;
  CHECK_THROWS(c.validate());
  c = {};
  c.window = 4;
  CHECK_THROWS(c.validate());
}

TEST_CASE("the full objective leaves teacher parameters without gradient") {
  nn::ModelConfig m;
  m.visual_frames = 4;
  m.frame_size = 8;
  m.visual_widths = {2, 2};
  m.audio_frames = 12;
  m.audio_bins = 4;
  m.audio_widths = {3, 3, 3};
  m.feature_dim = 3;
  m.hidden_size = 2;
  m.num_classes = 3;
  const nn::TeacherModel teacher(m, 1);
  const nn::StudentModel student(m, true, 2);
  Rng rng = derive_stream(8, {});
  ad::Tape t;
  nn::BoundParams tp(t, teacher.params(), true);
  nn::BoundParams sp(t, student.params(), true);
  nn::Context tctx{t, tp, false, nullptr};
  nn::Context sctx{t, sp, false, nullptr};
  const auto tenc = teacher.encode(tctx, t.constant(testutil::random_tensor(teacher.input_shape(), rng)));
  const auto senc = student.encode(sctx, t.constant(testutil::random_tensor(student.input_shape(), rng)));
  const auto map = align::build_alignment_map(12, 4, 3.0, 7);
  loss::DistillConfig cfg;
  cfg.kd1_enabled = cfg.kd2_enabled = true;
  const ad::Var total = loss::total_loss(
      loss::label_smoothed_ce(student.logits(sctx, senc.sequence_vector), SmoothedTarget::make(3, 1, 0.1)),
      loss::seq_kd_loss(tenc.sequence_vector.value(), senc.sequence_vector),
      loss::frame_kd_loss(senc.frame_states, align::apply_alignment(map, tenc.frame_states.value())), cfg);
  t.backward(total);
  for (const Tensor& g : tp.gradients()) CHECK(g == Tensor(g.shape(), 0.0));
  double norm = 0.0;
  for (const Tensor& g : sp.gradients()) for (double v : g.data()) norm += v * v;
  CHECK(norm > 0.0);
}
