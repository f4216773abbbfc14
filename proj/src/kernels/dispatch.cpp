#include <atomic>
#include <cstdlib>
#include <string>

#include "agro/error.hpp"
#include "agro/kernels.hpp"

namespace agro::kernels {

namespace {

struct KernelTable {
  Isa isa;
  double (*dot)(const double*, const double*, std::size_t) noexcept;
  void (*axpy)(double, const double*, double*, std::size_t) noexcept;
  double (*weighted_sq_dist)(const double*, const double*, const double*, std::size_t) noexcept;
};

constexpr KernelTable kScalarTable{Isa::scalar, &scalar::dot, &scalar::axpy,
                                   &scalar::weighted_sq_dist};
constexpr KernelTable kAvx2Table{Isa::avx2, &avx2::dot, &avx2::axpy, &avx2::weighted_sq_dist};

bool cpu_has_avx2() noexcept {
#if (defined(__x86_64__) || defined(__i386__)) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* initial_table() noexcept {
  if (const char* env = std::getenv("AGRO_ISA"); env != nullptr && std::string(env) == "scalar") {
    return &kScalarTable;
  }
  return cpu_has_avx2() ? &kAvx2Table : &kScalarTable;
}

std::atomic<const KernelTable*>& table() noexcept {
  static std::atomic<const KernelTable*> t{initial_table()};
  return t;
}

void check_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

}  // namespace

std::string_view isa_name(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

bool isa_supported(Isa isa) noexcept {
  return isa == Isa::scalar || (isa == Isa::avx2 && cpu_has_avx2());
}

Isa active_isa() noexcept { return table().load(std::memory_order_relaxed)->isa; }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw ConfigError("instruction set not supported on this CPU: " + std::string(isa_name(isa)));
  }
  table().store(isa == Isa::avx2 ? &kAvx2Table : &kScalarTable, std::memory_order_relaxed);
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_same(a.size(), b.size(), "dot");
  return table().load(std::memory_order_relaxed)->dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  check_same(x.size(), y.size(), "axpy");
  table().load(std::memory_order_relaxed)->axpy(alpha, x.data(), y.data(), x.size());
}

double weighted_sq_dist(std::span<const double> x, std::span<const double> center,
                        std::span<const double> inv_var) {
  check_same(x.size(), center.size(), "weighted_sq_dist");
  check_same(x.size(), inv_var.size(), "weighted_sq_dist");
  return table().load(std::memory_order_relaxed)
      ->weighted_sq_dist(x.data(), center.data(), inv_var.data(), x.size());
}

}  // namespace agro::kernels
