#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"

#include "agro/error.hpp"
#include "agro/kernels.hpp"

using namespace agro;

namespace {

std::vector<double> randn(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("scalar dot is the plain sequential sum") {
  const std::vector<double> a{1, 2, 3}, b{4, -5, 6};
  CHECK(kernels::scalar::dot(a.data(), b.data(), 3) == 12.0);
  CHECK(kernels::scalar::dot(a.data(), b.data(), 0) == 0.0);
}

TEST_CASE("scalar weighted distance") {
  const std::vector<double> x{1, 2}, c{0, 0}, iv{1, 0.5};
  CHECK(kernels::scalar::weighted_sq_dist(x.data(), c.data(), iv.data(), 2) == doctest::Approx(3.0));
}

TEST_CASE("avx2 matches scalar on every tail length") {
  if (!kernels::isa_supported(kernels::Isa::avx2)) {
    MESSAGE("avx2 not available on this CPU; skipped");
    return;
  }
  std::mt19937_64 rng(11);
  for (std::size_t n = 0; n <= 67; ++n) {
    const auto a = randn(n, rng), b = randn(n, rng);
    auto iv = randn(n, rng);
    for (auto& v : iv) v = std::abs(v) + 0.1;

    double mag = 0, mag_d = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mag += std::abs(a[i] * b[i]);
      mag_d += (a[i] - b[i]) * (a[i] - b[i]) * iv[i];
    }
    const double tol = 1e-13 * (mag + 1.0);
    CHECK(std::abs(kernels::avx2::dot(a.data(), b.data(), n) - kernels::scalar::dot(a.data(), b.data(), n)) <= tol);
    CHECK(std::abs(kernels::avx2::weighted_sq_dist(a.data(), b.data(), iv.data(), n) -
                   kernels::scalar::weighted_sq_dist(a.data(), b.data(), iv.data(), n)) <= 1e-13 * (mag_d + 1.0));

    auto y1 = b, y2 = b;
    kernels::scalar::axpy(0.37, a.data(), y1.data(), n);
    kernels::avx2::axpy(0.37, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-15 * (std::abs(y1[i]) + 1.0));
  }
}

TEST_CASE("dispatch follows the selected isa") {
  const auto before = kernels::active_isa();
  std::mt19937_64 rng(3);
  const auto a = randn(37, rng), b = randn(37, rng);

  kernels::set_active_isa(kernels::Isa::scalar);
  CHECK(kernels::active_isa() == kernels::Isa::scalar);
  CHECK(kernels::dot(a, b) == kernels::scalar::dot(a.data(), b.data(), a.size()));

  if (kernels::isa_supported(kernels::Isa::avx2)) {
    kernels::set_active_isa(kernels::Isa::avx2);
    CHECK(kernels::dot(a, b) == kernels::avx2::dot(a.data(), b.data(), a.size()));
  } else {
    CHECK_THROWS_AS(kernels::set_active_isa(kernels::Isa::avx2), ConfigError);
  }
  kernels::set_active_isa(before);
}

TEST_CASE("isa names") {
  CHECK(kernels::isa_name(kernels::Isa::scalar) == "scalar");
  CHECK(kernels::isa_name(kernels::Isa::avx2) == "avx2");
}
