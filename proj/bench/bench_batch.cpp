// Serial vs OpenMP batch gradient accumulation on a student training step.
//
//   bench_batch [batch] [repeats]
#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "lipdistill/batch.hpp"
#include "lipdistill/training.hpp"

using namespace lipdistill;

namespace {

double seconds_for(const std::function<train::BatchOutcome()>& fn, int repeats, train::BatchOutcome& last) {
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < repeats; ++r) last = fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / repeats;
}

}  // namespace

int main(int argc, char** argv) {
  const std::size_t batch = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 16;
  const int repeats = argc > 2 ? std::atoi(argv[2]) : 3;

  data::SynthConfig synth;
  synth.train_per_class = 1;
  synth.val_per_class = synth.test_per_class = 0;
  const auto ds = data::generate_dataset(synth);
  const nn::ModelConfig cfg = train::model_config_for(synth, {});
  const nn::StudentModel model(cfg, true, 1);

  const train::SampleFn fn = [&](std::size_t pos) {
    const data::AVSample& s = ds.train[pos % ds.train.size()];
    Rng rng = derive_stream(1, {pos});
    const Tensor x = train::student_input(s, cfg.frame_size, true, rng, true);
    ad::Tape tape;
    nn::BoundParams bound(tape, model.params(), true);
    nn::Context ctx{tape, bound, true, &rng};
    const auto enc = model.encode(ctx, tape.constant(x));
    const ad::Var loss = loss::label_smoothed_ce(model.logits(ctx, enc.sequence_vector),
                                                 loss::SmoothedTarget::make(cfg.num_classes, s.label, 0.1));
    tape.backward(loss);
    train::SampleOutcome out;
    out.grads = bound.gradients();
    out.loss_base = loss.value().item();
    return out;
  };

  train::BatchOutcome serial, parallel;
  const double ts = seconds_for([&] { return train::run_batch_serial(batch, fn); }, repeats, serial);
  const double tp = seconds_for([&] { return train::run_batch_parallel(batch, fn); }, repeats, parallel);
  bool same = serial.loss_base == parallel.loss_base && serial.grads.size() == parallel.grads.size();
  for (std::size_t p = 0; same && p < serial.grads.size(); ++p) same = bitwise_equal(serial.grads[p], parallel.grads[p]);

  std::printf("batch %zu, %d threads, %d repeats\n", batch, omp_get_max_threads(), repeats);
  std::printf("serial   %.4f s/step\n", ts);
  std::printf("parallel %.4f s/step  (speed-up %.2fx)\n", tp, ts / tp);
  std::printf("results bit-identical: %s\n", same ? "yes" : "NO");
  return same ? 0 : 1;
}
