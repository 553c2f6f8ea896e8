#include "ood/kernels.hpp"

#include <algorithm>
#include <atomic>

#include "kernels_detail.hpp"
#include "ood/errors.hpp"

namespace ood::kernels {
namespace {

namespace ref {

void add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const double* a, double alpha, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * a[i];
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void relu(const double* a, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void relu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += dy[i];
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double reduce_sum(const double* a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

double reduce_max(const double* a, std::size_t n) {
  double m = a[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

} // namespace ref

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") != 0;
#else
  return false;
#endif
}

Backend default_backend() {
#if defined(OOD_HAVE_AVX2_TU)
  if (cpu_has_avx2()) return Backend::Avx2;
#endif
  return Backend::Scalar;
}

std::atomic<const detail::KernelTable*> g_table{nullptr};
std::atomic<Backend> g_backend{Backend::Scalar};

const detail::KernelTable* table_for(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return &detail::scalar_table();
    case Backend::Avx2:
#if defined(OOD_HAVE_AVX2_TU)
      return &detail::avx2_table();
#else
      return nullptr;
#endif
  }
  return nullptr;
}

const detail::KernelTable& table() {
  const detail::KernelTable* t = g_table.load(std::memory_order_acquire);
  if (!t) {
    Backend b = default_backend();
    t = table_for(b);
    g_backend.store(b, std::memory_order_relaxed);
    g_table.store(t, std::memory_order_release);
  }
  return *t;
}

} // namespace

namespace detail {

const KernelTable& scalar_table() {
  static const KernelTable t{ref::add,  ref::sub,          ref::mul,
                             ref::scale, ref::axpy,        ref::relu,
                             ref::relu_backward, ref::dot, ref::reduce_sum,
                             ref::reduce_max};
  return t;
}

} // namespace detail

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
  }
  return "unknown";
}

bool backend_available(Backend b) {
  if (b == Backend::Scalar) return true;
#if defined(OOD_HAVE_AVX2_TU)
  if (b == Backend::Avx2) return cpu_has_avx2();
#endif
  return false;
}

Backend active_backend() {
  table();
  return g_backend.load(std::memory_order_relaxed);
}

void set_backend(Backend b) {
  if (!backend_available(b)) {
    throw ValueError(std::string("kernel backend not available: ") + backend_name(b));
  }
  g_backend.store(b, std::memory_order_relaxed);
  g_table.store(table_for(b), std::memory_order_release);
}

void reset_backend() {
  Backend b = default_backend();
  g_backend.store(b, std::memory_order_relaxed);
  g_table.store(table_for(b), std::memory_order_release);
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  table().add(a, b, out, n);
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  table().sub(a, b, out, n);
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  table().mul(a, b, out, n);
}

void scale(const double* a, double alpha, double* out, std::size_t n) {
  table().scale(a, alpha, out, n);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  table().axpy(alpha, x, y, n);
}

void relu(const double* a, double* out, std::size_t n) {
  table().relu(a, out, n);
}

void relu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  table().relu_backward(x, dy, dx, n);
}

double dot(const double* a, const double* b, std::size_t n) {
  return table().dot(a, b, n);
}

double reduce_sum(const double* a, std::size_t n) {
  return table().reduce_sum(a, n);
}

double reduce_max(const double* a, std::size_t n) {
  if (n == 0) throw UsageError("reduce_max of empty range");
  return table().reduce_max(a, n);
}

} // namespace ood::kernels
