#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ood/errors.hpp"
#include "ood/kernels.hpp"
#include "test_util.hpp"

namespace ker = ood::kernels;
using testutil::bit_equal;
using testutil::random_vec;

namespace {

const std::vector<std::size_t> kSizes = {1, 2, 3, 4, 5, 7, 8, 15, 16, 31, 33, 100, 1000};

struct BackendGuard {
  ~BackendGuard() { ker::reset_backend(); }
};

} // namespace

TEST_CASE("scalar backend is always available") {
  CHECK(ker::backend_available(ker::Backend::Scalar));
  BackendGuard guard;
  ker::set_backend(ker::Backend::Scalar);
  CHECK(ker::active_backend() == ker::Backend::Scalar);
}

TEST_CASE("selecting an unavailable backend is an error") {
  if (ker::backend_available(ker::Backend::Avx2)) return;
  CHECK_THROWS_AS(ker::set_backend(ker::Backend::Avx2), ood::ValueError);
}

TEST_CASE("reduce_max of nothing is an error") {
  CHECK_THROWS_AS(ker::reduce_max(nullptr, 0), ood::UsageError);
}

TEST_CASE("elementwise kernels agree bit for bit across backends") {
  if (!ker::backend_available(ker::Backend::Avx2)) {
    MESSAGE("avx2 unavailable, nothing to compare");
    return;
  }
  BackendGuard guard;
  std::mt19937_64 rng(7);
  for (std::size_t n : kSizes) {
    const auto a = random_vec(rng, n);
    const auto b = random_vec(rng, n);
    const auto y0 = random_vec(rng, n);
    const double alpha = -1.75;

    auto run_all = [&](ker::Backend backend) {
      ker::set_backend(backend);
      std::vector<std::vector<double>> outs;
      std::vector<double> tmp(n);
      ker::add(a.data(), b.data(), tmp.data(), n);
      outs.push_back(tmp);
      ker::sub(a.data(), b.data(), tmp.data(), n);
      outs.push_back(tmp);
      ker::mul(a.data(), b.data(), tmp.data(), n);
      outs.push_back(tmp);
      ker::scale(a.data(), alpha, tmp.data(), n);
      outs.push_back(tmp);
      std::vector<double> y = y0;
      ker::axpy(alpha, a.data(), y.data(), n);
      outs.push_back(y);
      ker::relu(a.data(), tmp.data(), n);
      outs.push_back(tmp);
      std::vector<double> dx = y0;
      ker::relu_backward(a.data(), b.data(), dx.data(), n);
      outs.push_back(dx);
      return outs;
    };

    const auto scalar = run_all(ker::Backend::Scalar);
    const auto avx2 = run_all(ker::Backend::Avx2);
    REQUIRE(scalar.size() == avx2.size());
    for (std::size_t i = 0; i < scalar.size(); ++i) {
      CAPTURE(n);
      CAPTURE(i);
      CHECK(bit_equal(scalar[i], avx2[i]));
    }
  }
}

TEST_CASE("reductions agree across backends within rounding") {
  if (!ker::backend_available(ker::Backend::Avx2)) {
    MESSAGE("avx2 unavailable, nothing to compare");
    return;
  }
  BackendGuard guard;
  std::mt19937_64 rng(11);
  for (std::size_t n : kSizes) {
    const auto a = random_vec(rng, n);
    const auto b = random_vec(rng, n);

    ker::set_backend(ker::Backend::Scalar);
    const double dot_s = ker::dot(a.data(), b.data(), n);
    const double sum_s = ker::reduce_sum(a.data(), n);
    const double max_s = ker::reduce_max(a.data(), n);

    ker::set_backend(ker::Backend::Avx2);
    const double dot_v = ker::dot(a.data(), b.data(), n);
    const double sum_v = ker::reduce_sum(a.data(), n);
    const double max_v = ker::reduce_max(a.data(), n);

    CAPTURE(n);
    // reassociation error bound: ~n * eps on the sum of magnitudes
    double mag = 0.0;
    for (std::size_t i = 0; i < n; ++i) mag += std::fabs(a[i] * b[i]);
    CHECK(std::fabs(dot_v - dot_s) <= 1e-13 * static_cast<double>(n) * std::max(1.0, mag));
    mag = 0.0;
    for (std::size_t i = 0; i < n; ++i) mag += std::fabs(a[i]);
    CHECK(std::fabs(sum_v - sum_s) <= 1e-13 * static_cast<double>(n) * std::max(1.0, mag));
    CHECK(max_v == max_s);
  }
}

TEST_CASE("dot matches a long-double reference on adversarial cancellation") {
  std::mt19937_64 rng(13);
  for (ker::Backend backend : {ker::Backend::Scalar, ker::Backend::Avx2}) {
    if (!ker::backend_available(backend)) continue;
    BackendGuard guard;
    ker::set_backend(backend);
    const std::size_t n = 64;
    // pairs (v, -v) shuffled so partial sums swing through large magnitudes
    std::vector<double> a;
    for (std::size_t i = 0; i < n / 2; ++i) {
      const double v = std::ldexp(1.0 + i * 0.001, static_cast<int>(i % 30));
      a.push_back(v);
      a.push_back(-v);
    }
    std::shuffle(a.begin(), a.end(), rng);
    std::vector<double> ones(n, 1.0);
    long double ref = 0.0L;
    for (double v : a) ref += static_cast<long double>(v);
    const double got = ker::dot(a.data(), ones.data(), n);
    // plain summation: error stays within a few ulps of the largest partial
    CHECK(std::fabs(got - static_cast<double>(ref)) <= 1e-4);
  }
}
