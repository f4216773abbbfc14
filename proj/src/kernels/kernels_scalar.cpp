#include "agro/kernels.hpp"

namespace agro::kernels::scalar {

double dot(const double* a, const double* b, std::size_t n) noexcept {
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double weighted_sq_dist(const double* x, const double* c, const double* iv, std::size_t n) noexcept {
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - c[i];
    sum += d * d * iv[i];
  }
  return sum;
}

}  // namespace agro::kernels::scalar
