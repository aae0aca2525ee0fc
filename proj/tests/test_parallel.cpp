#include <doctest.h>

#include <omp.h>

#include <atomic>

#include "lipdistill/batch.hpp"
#include "lipdistill/training.hpp"
#include "test_util.hpp"

using namespace lipdistill;
using namespace lipdistill::train;

namespace {

// Forces several threads even on a single core so the schedules really differ.
struct Threads {
  int saved = omp_get_max_threads();
  explicit Threads(int n) { omp_set_num_threads(n); }
  ~Threads() { omp_set_num_threads(saved); }
};

SampleFn synthetic_samples() {
  return [](std::size_t pos) {
    Rng rng = derive_stream(17, {pos});
    SampleOutcome s;
    s.grads = {testutil::random_tensor({3, 4}, rng, -1e3, 1e3), testutil::random_tensor({7}, rng, -1e-6, 1e-6)};
    s.loss_base = uniform(rng, 0.0, 10.0);
    s.loss_kd1 = uniform(rng, 0.0, 1.0);
    s.loss_kd2 = uniform(rng, 0.0, 1e5);
    s.correct = pos % 3 == 0;
    return s;
  };
}

data::SynthConfig small_synth() {
  data::SynthConfig s;
  s.num_classes = 3;
  s.train_per_class = 4;
  s.val_per_class = 2;
  s.test_per_class = 2;
  s.visual_frames = 8;
  s.raw_frame_size = 10;
  s.audio_frames = 24;
  s.audio_bins = 6;
  s.word_frames = 4;
  s.boundary_jitter = 1;
  s.confusable_pairs = {};
  return s;
}

nn::ModelConfig small_model(const data::SynthConfig& s) {
  nn::ModelConfig m;
  m.frame_size = 8;
  m.visual_widths = {2, 3};
  m.audio_widths = {4, 4, 4};
  m.feature_dim = 4;
  m.se_reduction = 2;
  m.hidden_size = 3;
  return model_config_for(s, m);
}

}  // namespace

TEST_CASE("batch reduction is bit-identical across schedules and thread counts") {
  const SampleFn fn = synthetic_samples();
  const BatchOutcome ref = run_batch_serial(13, fn);
  for (int threads : {1, 2, 3, 8}) {
    Threads t(threads);
    const BatchOutcome par = run_batch_parallel(13, fn);
    REQUIRE(par.grads.size() == ref.grads.size());
    for (std::size_t p = 0; p < ref.grads.size(); ++p) CHECK(bitwise_equal(par.grads[p], ref.grads[p]));
    CHECK(par.loss_base == ref.loss_base);
    CHECK(par.loss_kd1 == ref.loss_kd1);
    CHECK(par.loss_kd2 == ref.loss_kd2);
    CHECK(par.correct == ref.correct);
  }
  CHECK(ref.correct == 5);
  CHECK_THROWS(run_batch_serial(0, fn));
  CHECK_THROWS(run_batch_parallel(0, fn));
}

TEST_CASE("batch result is the mean of the sample outcomes") {
  const SampleFn fn = synthetic_samples();
  const BatchOutcome out = run_batch_serial(4, fn);
  double base = 0.0;
  Tensor g({3, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    const SampleOutcome s = fn(i);
    base += s.loss_base;
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += s.grads[0][k];
  }
  CHECK(std::abs(out.loss_base - base / 4.0) < 1e-12);
  CHECK(max_abs_diff(out.grads[0], [&] {
          for (std::size_t k = 0; k < g.size(); ++k) g[k] /= 4.0;
          return g;
        }()) < 1e-9);
}

TEST_CASE("exceptions inside the parallel loop reach the caller, after every index ran") {
  Threads t(4);
  std::atomic<int> ran{0};
  CHECK_THROWS_AS(for_each_index(20, Execution::kParallel,
                                 [&](std::size_t i) {
                                   ++ran;
                                   if (i == 7) throw std::runtime_error("boom");
                                 }),
                  std::runtime_error);
  CHECK(ran == 20);
  CHECK_THROWS_AS(for_each_index(3, Execution::kSerial, [](std::size_t) { throw std::logic_error("x"); }),
                  std::logic_error);
}

TEST_CASE("training and evaluation do not depend on the schedule") {
  Threads t(3);
  const auto synth = small_synth();
  const auto ds = data::generate_dataset(synth);
  const auto model = small_model(synth);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.initial_lr = 3e-3;
  cfg.max_time_mask = 4;
  cfg.max_freq_mask = 2;
  RunOptions serial;
  serial.execution = Execution::kSerial;
  const auto ts = train_teacher(ds, model, cfg, 0.1, serial);
  const auto tp = train_teacher(ds, model, cfg, 0.1);
  CHECK(nn::bitwise_equal(ts.checkpoint.params, tp.checkpoint.params));
  for (std::size_t i = 0; i < ts.steps.size(); ++i) CHECK(ts.steps[i].loss_total == tp.steps[i].loss_total);

  const auto teacher = make_teacher(model, tp.checkpoint);
  loss::DistillConfig d;
  d.kd1_enabled = d.kd2_enabled = true;
  for (bool mixup : {false, true}) {
    d.mixup_enabled = mixup;
    const auto ss = train_student(ds, {teacher, true}, model, cfg, d, serial);
    const auto sp = train_student(ds, {teacher, true}, model, cfg, d);
    CHECK(nn::bitwise_equal(ss.checkpoint.params, sp.checkpoint.params));
    for (std::size_t i = 0; i < ss.steps.size(); ++i) {
      CHECK(ss.steps[i].loss_kd1 == sp.steps[i].loss_kd1);
      CHECK(ss.steps[i].loss_kd2 == sp.steps[i].loss_kd2);
    }
    const auto student = make_student(model, true, sp.checkpoint);
    CHECK(evaluate_student(student, ds.test, true, Execution::kSerial) ==
          evaluate_student(student, ds.test, true, Execution::kParallel));
  }
  CHECK(evaluate_teacher(teacher, ds.test, true, Execution::kSerial) ==
        evaluate_teacher(teacher, ds.test, true, Execution::kParallel));
}
