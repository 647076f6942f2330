#include "moelab/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <vector>

namespace moelab::kernels {

namespace {

std::atomic<int> g_threads{1};

// One output row of nn: c_row[n] (+)= a_row[k] * b[k x n].
// i-k-j order; per output element the k-accumulation is ascending, matching
// the naive dot product, so reordering for vectorization does not change
// the floating-point result.
inline void nn_row(const float* a_row, const float* b, float* c_row, int64_t k,
                   int64_t n, bool accumulate) {
  if (!accumulate) std::memset(c_row, 0, sizeof(float) * static_cast<size_t>(n));
  for (int64_t p = 0; p < k; ++p) {
    const float av = a_row[p];
    const float* b_row = b + p * n;
    for (int64_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

// One output row of tn: c_row[n] (+)= sum_i a[i][p] * g[i][n-row].
inline void tn_row(const float* a, const float* g, float* c_row, int64_t m,
                   int64_t k, int64_t n, int64_t p, bool accumulate) {
  if (!accumulate) std::memset(c_row, 0, sizeof(float) * static_cast<size_t>(n));
  for (int64_t i = 0; i < m; ++i) {
    const float av = a[i * k + p];
    const float* g_row = g + i * n;
    for (int64_t j = 0; j < n; ++j) c_row[j] += av * g_row[j];
  }
}

// b[n x k] -> bt[k x n]
inline void transpose(const float* b, float* bt, int64_t n, int64_t k) {
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < k; ++c) bt[c * n + r] = b[r * k + c];
}

}  // namespace

void set_threads(int n) { g_threads.store(std::max(1, n)); }
int threads() { return g_threads.load(); }

void matmul_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate) {
  parallel_for(m, [&](int64_t i) { nn_row(a + i * k, b, c + i * n, k, n, accumulate); });
}

void matmul_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate) {
  // Transposing b turns the row-dot products into nn rows, which vectorize;
  // the k-order per element is unchanged, so results match the naive dots.
  std::vector<float> bt(static_cast<size_t>(k) * static_cast<size_t>(n));
  transpose(b, bt.data(), n, k);
  parallel_for(m, [&](int64_t i) { nn_row(a + i * k, bt.data(), c + i * n, k, n, accumulate); });
}

void matmul_tn(const float* a, const float* g, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate) {
  parallel_for(k, [&](int64_t p) { tn_row(a, g, c + p * n, m, k, n, p, accumulate); });
}

namespace serial {

void matmul_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) nn_row(a + i * k, b, c + i * n, k, n, accumulate);
}

void matmul_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate) {
  std::vector<float> bt(static_cast<size_t>(k) * static_cast<size_t>(n));
  transpose(b, bt.data(), n, k);
  for (int64_t i = 0; i < m; ++i) nn_row(a + i * k, bt.data(), c + i * n, k, n, accumulate);
}

void matmul_tn(const float* a, const float* g, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate) {
  for (int64_t p = 0; p < k; ++p) tn_row(a, g, c + p * n, m, k, n, p, accumulate);
}

}  // namespace serial

}  // namespace moelab::kernels
