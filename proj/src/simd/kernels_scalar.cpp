#include "fgss/simd/kernels.hpp"
#include "fgss/simd/reference.hpp"

namespace fgss::simd::detail {

namespace {

void gemm_scalar(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  reference::gemm<float>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

const KernelTable kScalar{
    Isa::scalar,
    &gemm_scalar,
    &reference::axpy<float>,
    &reference::relu_forward<float>,
    &reference::relu_backward<float>,
    &reference::scale_shift<float>,
    &reference::sum_sumsq<float>,
    &reference::dot<float>,
};

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

}  // namespace fgss::simd::detail
