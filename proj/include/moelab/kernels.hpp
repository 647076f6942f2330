#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace moelab::kernels {

// Thread budget for the parallel kernels. 1 disables parallel dispatch.
// The parallel kernels partition output rows and keep the per-element
// accumulation order identical to the serial reference, so results are
// bit-identical for any thread count (kernels_test asserts this).
void set_threads(int n);
int threads();

// Runs body(i) for i in [0, n), across threads when the budget allows.
// Iterations must be independent.
template <typename F>
void parallel_for(int64_t n, F&& body) {
#ifdef _OPENMP
  if (threads() > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(threads())
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
#endif
  for (int64_t i = 0; i < n; ++i) body(i);
}

// Row-major single-precision matrix products.
//   nn: c[m x n] = a[m x k] * b[k x n]
//   nt: c[m x n] = a[m x k] * b[n x k]^T
//   tn: c[k x n] = a[m x k]^T * g[m x n]
// With accumulate, += into c instead of overwriting.
void matmul_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate = false);
void matmul_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate = false);
void matmul_tn(const float* a, const float* g, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate = false);

// Single-threaded reference implementations with the same arithmetic order.
// Kept for tests and as the baseline in the kernel benchmark.
namespace serial {
void matmul_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate = false);
void matmul_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate = false);
void matmul_tn(const float* a, const float* g, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate = false);
}  // namespace serial

}  // namespace moelab::kernels
