// SPDX-License-Identifier: Apache-2.0
//
// Dense inner loops shared by the tape primitives, the fused GRU scan and the
// convolutions. All matrices are row-major; every routine accumulates into C.
#pragma once

#include <cstddef>

namespace lipdistill::kernels {

// C[M×N] += A[M×K] · B[K×N]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// C[M×K] += A[M×N] · B[K×N]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
// C[K×N] += A[M×K]ᵀ · B[M×N]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);

}  // namespace lipdistill::kernels
