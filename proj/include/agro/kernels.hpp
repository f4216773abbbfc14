#pragma once

// Inner-loop arithmetic shared by the network, the mixture model and the
// grouper. Every kernel has a scalar reference implementation and, where the
// CPU allows it, an AVX2/FMA variant. The active variant is chosen once at
// startup (AGRO_ISA=scalar forces the reference path) and can be switched
// explicitly for equivalence testing.

#include <cstddef>
#include <span>
#include <string_view>

namespace agro::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa) noexcept;
bool isa_supported(Isa isa) noexcept;
Isa active_isa() noexcept;
// Throws ConfigError when the CPU lacks the requested instruction set.
void set_active_isa(Isa isa);

// Sum of a[i] * b[i].
double dot(std::span<const double> a, std::span<const double> b);
// y += alpha * x.
void axpy(double alpha, std::span<const double> x, std::span<double> y);
// Sum of (x[i] - center[i])^2 * inv_var[i].
double weighted_sq_dist(std::span<const double> x, std::span<const double> center,
                        std::span<const double> inv_var);

// Raw per-ISA entry points. Callers normally go through the dispatched
// functions above; tests call these directly to compare implementations.
namespace scalar {
double dot(const double* a, const double* b, std::size_t n) noexcept;
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;
double weighted_sq_dist(const double* x, const double* c, const double* iv, std::size_t n) noexcept;
}  // namespace scalar

namespace avx2 {
// Present on every build; on non-x86 targets these forward to scalar.
double dot(const double* a, const double* b, std::size_t n) noexcept;
void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept;
double weighted_sq_dist(const double* x, const double* c, const double* iv, std::size_t n) noexcept;
}  // namespace avx2

}  // namespace agro::kernels
