#pragma once

#include <cstddef>
#include <string>

// Dense f64 primitives under the tensor layer. Every kernel has a scalar
// reference implementation; on x86-64 an AVX2 variant is compiled into a
// separate translation unit and selected at runtime when the CPU supports it.
//
// Contract between backends:
//   - elementwise kernels (add, sub, mul, scale, axpy, relu, relu_backward)
//     produce bit-identical results on every backend; the AVX2 variants avoid
//     FMA for this reason
//   - reduce_max is exact (comparisons never round)
//   - dot and reduce_sum may reassociate, so backends agree only to rounding
//     error (tests bound the difference)
namespace ood::kernels {

enum class Backend { Scalar, Avx2 };

const char* backend_name(Backend b);

// True if the backend was compiled in and the CPU can run it.
bool backend_available(Backend b);

Backend active_backend();

// Overrides dispatch, e.g. to force the scalar path in equivalence tests.
// Throws ValueError if the backend is unavailable.
void set_backend(Backend b);

// Restores the default choice (best available backend).
void reset_backend();

// out[i] = a[i] + b[i]
void add(const double* a, const double* b, double* out, std::size_t n);
// out[i] = a[i] - b[i]
void sub(const double* a, const double* b, double* out, std::size_t n);
// out[i] = a[i] * b[i]
void mul(const double* a, const double* b, double* out, std::size_t n);
// out[i] = alpha * a[i]
void scale(const double* a, double alpha, double* out, std::size_t n);
// y[i] += alpha * x[i]
void axpy(double alpha, const double* x, double* y, std::size_t n);
// out[i] = max(a[i], 0)
void relu(const double* a, double* out, std::size_t n);
// dx[i] += dy[i] where x[i] > 0 (subgradient 0 at x == 0)
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n);

double dot(const double* a, const double* b, std::size_t n);
double reduce_sum(const double* a, std::size_t n);
// Requires n >= 1.
double reduce_max(const double* a, std::size_t n);

} // namespace ood::kernels
