#pragma once

#include <cstddef>

// Dispatch table shared between the scalar TU and the AVX2 TU. Not installed;
// the public surface is kernels.hpp.
namespace ood::kernels::detail {

struct KernelTable {
  void (*add)(const double*, const double*, double*, std::size_t);
  void (*sub)(const double*, const double*, double*, std::size_t);
  void (*mul)(const double*, const double*, double*, std::size_t);
  void (*scale)(const double*, double, double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*relu)(const double*, double*, std::size_t);
  void (*relu_backward)(const double*, const double*, double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  double (*reduce_sum)(const double*, std::size_t);
  double (*reduce_max)(const double*, std::size_t);
};

const KernelTable& scalar_table();

#if defined(OOD_HAVE_AVX2_TU)
const KernelTable& avx2_table();
#endif

} // namespace ood::kernels::detail
