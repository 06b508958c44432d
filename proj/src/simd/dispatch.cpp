#include "fgss/simd/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace fgss::simd {

#if !FGSS_HAVE_AVX2_TU
namespace detail {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace detail
#endif

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
  }
  return "unknown";
}

bool supported(Isa isa) {
  if (isa == Isa::scalar) return true;
#if defined(__x86_64__) || defined(__i386__)
  if (isa == Isa::avx2) {
    return detail::avx2_table() != nullptr && __builtin_cpu_supports("avx2") &&
           __builtin_cpu_supports("fma");
  }
#endif
  return false;
}

Isa detected_isa() { return supported(Isa::avx2) ? Isa::avx2 : Isa::scalar; }

const KernelTable& table(Isa isa) {
  if (!supported(isa)) {
    throw std::invalid_argument("simd: ISA not supported on this CPU: " + std::string(isa_name(isa)));
  }
  if (isa == Isa::avx2) return *detail::avx2_table();
  return detail::scalar_table();
}

namespace {

const KernelTable* initial_table() {
  if (const char* env = std::getenv("FGSS_SIMD")) {
    const std::string v(env);
    if (v == "scalar") return &detail::scalar_table();
    if (v == "avx2" && supported(Isa::avx2)) return detail::avx2_table();
  }
  return &table(detected_isa());
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> t{initial_table()};
  return t;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

void set_isa(Isa isa) { current().store(&table(isa), std::memory_order_release); }

}  // namespace fgss::simd
