// AVX2 variants of the f64 kernels. Compiled with -mavx2 in its own TU so the
// rest of the library stays baseline x86-64; dispatch decides at runtime.
//
// Elementwise kernels must stay bit-identical to the scalar reference, which
// is why multiplies and adds are kept as separate instructions (no FMA) and
// relu_backward uses a masked store instead of adding a zeroed addend.

#include <immintrin.h>

#include <cstddef>

#include "kernels_detail.hpp"

namespace ood::kernels::detail {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

inline double hmax(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_max_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_max_sd(lo, shuf));
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d va = _mm256_loadu_pd(a + i);
    __m256d vb = _mm256_loadu_pd(b + i);
    _mm256_storeu_pd(out + i, _mm256_add_pd(va, vb));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d va = _mm256_loadu_pd(a + i);
    __m256d vb = _mm256_loadu_pd(b + i);
    _mm256_storeu_pd(out + i, _mm256_sub_pd(va, vb));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d va = _mm256_loadu_pd(a + i);
    __m256d vb = _mm256_loadu_pd(b + i);
    _mm256_storeu_pd(out + i, _mm256_mul_pd(va, vb));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const double* a, double alpha, double* out, std::size_t n) {
  __m256d valpha = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d va = _mm256_loadu_pd(a + i);
    _mm256_storeu_pd(out + i, _mm256_mul_pd(valpha, va));
  }
  for (; i < n; ++i) out[i] = alpha * a[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  __m256d valpha = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vx = _mm256_loadu_pd(x + i);
    __m256d vy = _mm256_loadu_pd(y + i);
    __m256d prod = _mm256_mul_pd(valpha, vx);
    _mm256_storeu_pd(y + i, _mm256_add_pd(vy, prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu(const double* a, double* out, std::size_t n) {
  __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d va = _mm256_loadu_pd(a + i);
    _mm256_storeu_pd(out + i, _mm256_max_pd(va, zero));
  }
  for (; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void relu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vx = _mm256_loadu_pd(x + i);
    __m256d vdy = _mm256_loadu_pd(dy + i);
    __m256d vdx = _mm256_loadu_pd(dx + i);
    __m256d mask = _mm256_cmp_pd(vx, zero, _CMP_GT_OQ);
    __m256d sum = _mm256_add_pd(vdx, vdy);
    _mm256_maskstore_pd(dx + i, _mm256_castpd_si256(mask), sum);
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += dy[i];
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d va = _mm256_loadu_pd(a + i);
    __m256d vb = _mm256_loadu_pd(b + i);
    acc = _mm256_add_pd(acc, _mm256_mul_pd(va, vb));
  }
  double total = hsum(acc);
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

double reduce_sum(const double* a, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
  }
  double total = hsum(acc);
  for (; i < n; ++i) total += a[i];
  return total;
}

double reduce_max(const double* a, std::size_t n) {
  if (n < 4) {
    double m = a[0];
    for (std::size_t i = 1; i < n; ++i) m = m > a[i] ? m : a[i];
    return m;
  }
  __m256d acc = _mm256_loadu_pd(a);
  std::size_t i = 4;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_max_pd(acc, _mm256_loadu_pd(a + i));
  }
  double m = hmax(acc);
  for (; i < n; ++i) m = m > a[i] ? m : a[i];
  return m;
}

} // namespace

const KernelTable& avx2_table() {
  static const KernelTable t{add,  sub,          mul, scale, axpy,
                             relu, relu_backward, dot, reduce_sum, reduce_max};
  return t;
}

} // namespace ood::kernels::detail
