#pragma once

#include <cstdint>

namespace storyviz {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, where op transposes
// when the corresponding flag is set. A is m x k after op, B is k x n after
// op, C is m x n. Backed by OpenBLAS; instantiated for float and double.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, const T* b, T beta, T* c);

// Returns the number of GEMM calls issued so far (used by benchmarks/tests).
uint64_t gemm_call_count();

}  // namespace storyviz
