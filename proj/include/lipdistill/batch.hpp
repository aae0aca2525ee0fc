// SPDX-License-Identifier: Apache-2.0
//
// Per-batch gradient accumulation. Every sample is processed on its own tape
// and its gradients are summed in sample-index order, so the parallel and the
// serial schedules produce bit-identical results.
#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "lipdistill/tensor.hpp"

namespace lipdistill::train {

enum class Execution { kSerial, kParallel };

struct SampleOutcome {
  std::vector<Tensor> grads;  // ParameterSet order
  double loss_base = 0.0;
  double loss_kd1 = 0.0;
  double loss_kd2 = 0.0;
  bool correct = false;
};

struct BatchOutcome {
  std::vector<Tensor> grads;  // batch mean
  double loss_base = 0.0;     // batch means of the components
  double loss_kd1 = 0.0;
  double loss_kd2 = 0.0;
  std::size_t correct = 0;
};

using SampleFn = std::function<SampleOutcome(std::size_t position)>;

/// Serial reference: one sample at a time, accumulated as it goes.
BatchOutcome run_batch_serial(std::size_t batch, const SampleFn& fn);
/// OpenMP over samples; outcomes are buffered and reduced in index order.
BatchOutcome run_batch_parallel(std::size_t batch, const SampleFn& fn);
BatchOutcome run_batch(std::size_t batch, const SampleFn& fn, Execution exec);

/// Runs fn(i) for i in [0, n), in parallel when asked. The first exception
/// thrown by any iteration is rethrown after the loop.
void for_each_index(std::size_t n, Execution exec, const std::function<void(std::size_t)>& fn);

}  // namespace lipdistill::train
