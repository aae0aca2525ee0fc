// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/kernels.hpp"

namespace lipdistill::kernels {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  // Row blocks of C stay cache resident while B streams through once per block.
  // Each C element still accumulates over p in ascending order.
  constexpr std::size_t kBlock = 8;
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    const std::size_t i1 = i0 + kBlock < m ? i0 + kBlock : m;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b_row = b + p * n;
      for (std::size_t i = i0; i < i1; ++i) {
        const double av = a[i * k + p];
        if (av == 0.0) continue;
        double* c_row = c + i * n;
        for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
      }
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a_row = a + i * n;
    double* c_row = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* b_row = b + p * n;
      // Four independent partial sums so the dot product is not latency bound.
      double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
      std::size_t j = 0;
      for (; j + 4 <= n; j += 4) {
        acc0 += a_row[j] * b_row[j];
        acc1 += a_row[j + 1] * b_row[j + 1];
        acc2 += a_row[j + 2] * b_row[j + 2];
        acc3 += a_row[j + 3] * b_row[j + 3];
      }
      for (; j < n; ++j) acc0 += a_row[j] * b_row[j];
      c_row[p] += (acc0 + acc1) + (acc2 + acc3);
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    double* c_row = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* b_row = b + i * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

}  // namespace lipdistill::kernels
