#include "trelm/kernels.hpp"

#include <algorithm>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace trelm::kernels {
namespace {

inline void row_ab(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                   std::size_t n, bool accumulate) {
  double* out = c + i * n;
  if (!accumulate) std::fill(out, out + n, 0.0);
  const double* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double s = arow[p];
    if (s == 0.0) continue;
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += s * brow[j];
  }
}

inline void row_abt(const double* a, const double* b, double* c, std::size_t i, std::size_t k,
                    std::size_t n, bool accumulate) {
  double* out = c + i * n;
  const double* arow = a + i * k;
  // Four outputs at a time for instruction-level parallelism; each output
  // still sums over p in order.
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    const double* b0 = b + j * k;
    const double* b1 = b0 + k;
    const double* b2 = b1 + k;
    const double* b3 = b2 + k;
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = arow[p];
      a0 += x * b0[p];
      a1 += x * b1[p];
      a2 += x * b2[p];
      a3 += x * b3[p];
    }
    out[j] = accumulate ? out[j] + a0 : a0;
    out[j + 1] = accumulate ? out[j + 1] + a1 : a1;
    out[j + 2] = accumulate ? out[j + 2] + a2 : a2;
    out[j + 3] = accumulate ? out[j + 3] + a3 : a3;
  }
  for (; j < n; ++j) {
    const double* brow = b + j * k;
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
    out[j] = accumulate ? out[j] + acc : acc;
  }
}

inline void row_atb(const double* a, const double* b, double* c, std::size_t i, std::size_t m,
                    std::size_t k, std::size_t n, bool accumulate) {
  double* out = c + i * n;
  if (!accumulate) std::fill(out, out + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double s = a[p * m + i];
    if (s == 0.0) continue;
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += s * brow[j];
  }
}

inline bool worth_forking(std::size_t m, std::size_t k, std::size_t n) {
  return m > 1 && m * k * n >= kParallelWorkThreshold;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (worth_forking(m, k, n))
  for (long i = 0; i < rows; ++i) row_ab(a, b, c, static_cast<std::size_t>(i), k, n, accumulate);
}

void matmul_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (worth_forking(m, k, n))
  for (long i = 0; i < rows; ++i) row_abt(a, b, c, static_cast<std::size_t>(i), k, n, accumulate);
}

void matmul_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  const long rows = static_cast<long>(m);
#pragma omp parallel for schedule(static) if (worth_forking(m, k, n))
  for (long i = 0; i < rows; ++i) {
    row_atb(a, b, c, static_cast<std::size_t>(i), m, k, n, accumulate);
  }
}

namespace reference {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) row_ab(a, b, c, i, k, n, accumulate);
}

void matmul_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) row_abt(a, b, c, i, k, n, accumulate);
}

void matmul_at(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) row_atb(a, b, c, i, m, k, n, accumulate);
}

}  // namespace reference
}  // namespace trelm::kernels
