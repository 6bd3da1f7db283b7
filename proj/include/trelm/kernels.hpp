#pragma once

// Dense row-major GEMM-style kernels.
//
// Every kernel has an OpenMP variant (namespace `kernels`) and a serial
// reference (namespace `kernels::reference`). Both compute each output row
// with the same inner routine, so the two agree bitwise for any thread count.

#include <cstddef>

namespace trelm::kernels {

/// Row-parallel kernels only fork when m*n*k exceeds this many multiply-adds.
inline constexpr std::size_t kParallelWorkThreshold = 1u << 16;

/// C[m x n] (+)= A[m x k] * B[k x n]
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate);
/// C[m x n] (+)= A[m x k] * B[n x k]^T
void matmul_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);
/// C[m x n] (+)= A[k x m]^T * B[k x n]
void matmul_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);

/// Number of worker threads the OpenMP variants will use (1 without OpenMP).
int max_threads();

namespace reference {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate);
void matmul_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);
void matmul_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);

}  // namespace reference
}  // namespace trelm::kernels
