// SPDX-License-Identifier: Apache-2.0
// Dense row-major GEMM kernels. All of them accumulate into C.
//
// Every output element is summed over k in ascending order and the inner
// loops only vectorize across output columns, so results do not depend on
// pointer alignment, row count or blocking.
#pragma once

#include <cstddef>
#include <vector>

namespace duorec::kernels {

namespace detail {

// c_r[0:n] += a_r * b[0:n] for four rows at once; b is read once per k.
inline void axpy4(std::size_t n, const double* __restrict b, double a0, double a1, double a2, double a3,
                  double* __restrict c0, double* __restrict c1, double* __restrict c2, double* __restrict c3) {
  for (std::size_t j = 0; j < n; ++j) {
    const double bj = b[j];
    c0[j] += a0 * bj;
    c1[j] += a1 * bj;
    c2[j] += a2 * bj;
    c3[j] += a3 * bj;
  }
}

inline void axpy1(std::size_t n, const double* __restrict b, double a, double* __restrict c) {
  for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
}

}  // namespace detail

/// C[m x n] += A[m x k] . B[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* ar = a + i * k;
    double* cr = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      detail::axpy4(n, b + p * n, ar[p], ar[k + p], ar[2 * k + p], ar[3 * k + p], cr, cr + n, cr + 2 * n,
                    cr + 3 * n);
    }
  }
  for (; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) detail::axpy1(n, b + p * n, a[i * k + p], c + i * n);
  }
}

/// C[m x n] += A^T . B with A[k x m], B[k x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a + p * m;
    const double* br = b + p * n;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* cr = c + i * n;
      detail::axpy4(n, br, ar[i], ar[i + 1], ar[i + 2], ar[i + 3], cr, cr + n, cr + 2 * n, cr + 3 * n);
    }
    for (; i < m; ++i) detail::axpy1(n, br, ar[i], c + i * n);
  }
}

inline void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

/// C[m x n] += A[m x k] . B^T with B[n x k]
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  std::vector<double> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm_nn(m, k, n, a, bt.data(), c);
}

}  // namespace duorec::kernels
