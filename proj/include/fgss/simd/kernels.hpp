#pragma once

// Dense float32 kernels behind a runtime-selected dispatch table.
//
// Every kernel has a portable scalar reference in kernels_scalar.cpp and, on
// x86-64, an AVX2+FMA variant in kernels_avx2.cpp. The active table is chosen
// once from CPUID; FGSS_SIMD=scalar in the environment (or set_isa) forces the
// reference path. Tests compare the two tables element by element.

#include <cstddef>
#include <string_view>

namespace fgss::simd {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

/// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C, with op(A) M×K and
/// op(B) K×N. lda/ldb/ldc are row strides of the stored (untransposed) arrays.
using GemmFn = void (*)(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                        const float* a, int lda, const float* b, int ldb, float beta,
                        float* c, int ldc);

struct KernelTable {
  Isa isa;
  GemmFn gemm;
  // y += alpha * x
  void (*axpy)(std::size_t n, float alpha, const float* x, float* y);
  // y = max(x, 0)
  void (*relu_forward)(std::size_t n, const float* x, float* y);
  // dx = (x > 0) ? dy : 0
  void (*relu_backward)(std::size_t n, const float* x, const float* dy, float* dx);
  // y = x * scale + shift
  void (*scale_shift)(std::size_t n, const float* x, float scale, float shift, float* y);
  // Sum and sum of squares accumulated in double.
  void (*sum_sumsq)(std::size_t n, const float* x, double* sum, double* sumsq);
  // Returns sum(x * y) accumulated in double.
  double (*dot)(std::size_t n, const float* x, const float* y);
};

/// Best ISA the running CPU supports (ignores overrides).
Isa detected_isa();

/// Table currently used by the nn layers.
const KernelTable& active();

/// Table for a specific ISA; throws std::invalid_argument if unsupported here.
const KernelTable& table(Isa isa);

/// Overrides the active table (tests, FGSS_SIMD). Throws if unsupported.
void set_isa(Isa isa);

bool supported(Isa isa);

namespace detail {
const KernelTable& scalar_table();
const KernelTable* avx2_table();  // nullptr when the TU is not built
}  // namespace detail

}  // namespace fgss::simd
