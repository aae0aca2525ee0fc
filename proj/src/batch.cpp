// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/batch.hpp"

#include <exception>
#include <mutex>
#include <stdexcept>

namespace lipdistill::train {

namespace {

void accumulate(BatchOutcome& acc, const SampleOutcome& s) {
  if (acc.grads.empty()) {
    acc.grads = s.grads;
  } else {
    if (acc.grads.size() != s.grads.size()) throw std::logic_error("batch: gradient count differs");
    for (std::size_t p = 0; p < s.grads.size(); ++p) {
      double* dst = acc.grads[p].raw();
      const double* src = s.grads[p].raw();
      for (std::size_t k = 0; k < s.grads[p].size(); ++k) dst[k] += src[k];
    }
  }
  acc.loss_base += s.loss_base;
  acc.loss_kd1 += s.loss_kd1;
  acc.loss_kd2 += s.loss_kd2;
  acc.correct += s.correct ? 1 : 0;
}

void finish(BatchOutcome& acc, std::size_t batch) {
  const double n = static_cast<double>(batch);
  for (auto& g : acc.grads) {
    for (std::size_t k = 0; k < g.size(); ++k) g[k] /= n;
  }
  acc.loss_base /= n;
  acc.loss_kd1 /= n;
  acc.loss_kd2 /= n;
}

}  // namespace

BatchOutcome run_batch_serial(std::size_t batch, const SampleFn& fn) {
  if (batch == 0) throw std::invalid_argument("batch: empty batch");
  BatchOutcome acc;
  for (std::size_t i = 0; i < batch; ++i) accumulate(acc, fn(i));
  finish(acc, batch);
  return acc;
}

BatchOutcome run_batch_parallel(std::size_t batch, const SampleFn& fn) {
  if (batch == 0) throw std::invalid_argument("batch: empty batch");
  std::vector<SampleOutcome> outcomes(batch);
  for_each_index(batch, Execution::kParallel, [&](std::size_t i) { outcomes[i] = fn(i); });
  BatchOutcome acc;
  for (const auto& s : outcomes) accumulate(acc, s);
  finish(acc, batch);
  return acc;
}

BatchOutcome run_batch(std::size_t batch, const SampleFn& fn, Execution exec) {
  return exec == Execution::kParallel ? run_batch_parallel(batch, fn) : run_batch_serial(batch, fn);
}

void for_each_index(std::size_t n, Execution exec, const std::function<void(std::size_t)>& fn) {
  if (exec == Execution::kSerial) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mutex;
  const long count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (long i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(mutex);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace lipdistill::train
