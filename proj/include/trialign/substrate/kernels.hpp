// Copyright 2026 The TriAlign Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

// Dense row-major matrix kernels. Loop orders keep the innermost loop
// contiguous so the compiler can vectorize it, and each output row depends only
// on the matching input row: results are bit-identical regardless of how many
// other rows are present.

namespace trialign::kernels {

namespace detail {

/// C[m x n] (+)= A * B[k x n] where A(i, p) = a[i * si + p * sp].
/// Register-blocked over 4 x 8 output tiles, each output element summed over
/// p in ascending order.
template <class T>
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t si, std::size_t sp, const T* b, T* c,
                  bool accumulate) {
  constexpr std::size_t R = 4, C = 8;
  for (std::size_t i0 = 0; i0 < m; i0 += R) {
    const std::size_t rn = std::min(R, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += C) {
      const std::size_t cn = std::min(C, n - j0);
      T acc[R][C] = {};
      if (accumulate)
        for (std::size_t r = 0; r < rn; ++r)
          for (std::size_t j = 0; j < cn; ++j) acc[r][j] = c[(i0 + r) * n + j0 + j];
      if (rn == R && cn == C) {
        for (std::size_t p = 0; p < k; ++p) {
          const T* brow = b + p * n + j0;
          for (std::size_t r = 0; r < R; ++r) {
            const T av = a[(i0 + r) * si + p * sp];
            for (std::size_t j = 0; j < C; ++j) acc[r][j] += av * brow[j];
          }
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const T* brow = b + p * n + j0;
          for (std::size_t r = 0; r < rn; ++r) {
            const T av = a[(i0 + r) * si + p * sp];
            for (std::size_t j = 0; j < cn; ++j) acc[r][j] += av * brow[j];
          }
        }
      }
      for (std::size_t r = 0; r < rn; ++r)
        for (std::size_t j = 0; j < cn; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
    }
  }
}

}  // namespace detail

/// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aval = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

/// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  thread_local std::vector<T> scratch;
  scratch.resize(n * k);
  transpose(n, k, b, scratch.data());
  gemm_nn(m, n, k, a, scratch.data(), c, accumulate);
}

/// C[m x n] (+)= A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  detail::gemm_strided(m, n, k, a, 1, m, b, c, accumulate);
}

}  // namespace trialign::kernels
