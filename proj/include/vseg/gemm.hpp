#pragma once

#include <cstddef>

namespace vseg {

// Row-major matrix products. Each output element is reduced serially in a
// fixed order, so results are bit-identical for any thread count.

// C[M,N] = A[M,K] * B[K,N]  (+= when accumulate)
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const std::ptrdiff_t mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
  for (std::ptrdiff_t i = 0; i < mm; ++i) {
    T* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[M,N] = A[M,K] * B[N,K]^T
template <class T>
void gemm_abt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n, bool accumulate) {
  const std::ptrdiff_t mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
  for (std::ptrdiff_t i = 0; i < mm; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        s0 += ai[p] * bj[p];
        s1 += ai[p + 1] * bj[p + 1];
        s2 += ai[p + 2] * bj[p + 2];
        s3 += ai[p + 3] * bj[p + 3];
      }
      T s = ((s0 + s1) + (s2 + s3));
      for (; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

// C[K,N] = A[M,K]^T * B[M,N]
template <class T>
void gemm_atb(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n, bool accumulate) {
  const std::ptrdiff_t kk = static_cast<std::ptrdiff_t>(k);
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
  for (std::ptrdiff_t i = 0; i < kk; ++i) {
    T* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = T(0);
    for (std::size_t p = 0; p < m; ++p) {
      const T api = a[p * k + i];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace vseg
