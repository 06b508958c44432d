// AVX2 + FMA kernels. This translation unit is compiled with -mavx2 -mfma and
// must only be entered through the dispatch table after a CPUID check.

#include "fgss/simd/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cstring>
#include <vector>

namespace fgss::simd::detail {

namespace {

// Blocking for a 6×16 register tile: 12 accumulators + 2 B vectors + 1
// broadcast fill the 16 ymm registers.
constexpr int kMr = 6;
constexpr int kNr = 16;
constexpr int kKc = 256;
constexpr int kMc = 96;
constexpr int kNc = 2048;

struct PackBuffers {
  std::vector<float> a;
  std::vector<float> b;
};

PackBuffers& buffers() {
  thread_local PackBuffers buf{std::vector<float>(static_cast<std::size_t>(kMc) * kKc),
                               std::vector<float>(static_cast<std::size_t>(kNc) * kKc)};
  return buf;
}

inline float load_a(bool ta, const float* a, int lda, int i, int p) {
  return ta ? a[static_cast<std::ptrdiff_t>(p) * lda + i] : a[static_cast<std::ptrdiff_t>(i) * lda + p];
}

// Packs an mc×kc block of op(A) into row slivers of height kMr, zero padded.
void pack_a(bool ta, const float* a, int lda, int i0, int p0, int mc, int kc, float* dst) {
  for (int ir = 0; ir < mc; ir += kMr) {
    const int rows = std::min(kMr, mc - ir);
    if (!ta) {
      for (int p = 0; p < kc; ++p) {
        for (int r = 0; r < rows; ++r) dst[p * kMr + r] = load_a(false, a, lda, i0 + ir + r, p0 + p);
        for (int r = rows; r < kMr; ++r) dst[p * kMr + r] = 0.0f;
      }
    } else {
      for (int p = 0; p < kc; ++p) {
        const float* src = a + static_cast<std::ptrdiff_t>(p0 + p) * lda + i0 + ir;
        for (int r = 0; r < rows; ++r) dst[p * kMr + r] = src[r];
        for (int r = rows; r < kMr; ++r) dst[p * kMr + r] = 0.0f;
      }
    }
    dst += static_cast<std::ptrdiff_t>(kc) * kMr;
  }
}

// Packs a kc×nc block of op(B) into column slivers of width kNr, zero padded.
void pack_b(bool tb, const float* b, int ldb, int p0, int j0, int kc, int nc, float* dst) {
  for (int jr = 0; jr < nc; jr += kNr) {
    const int cols = std::min(kNr, nc - jr);
    if (!tb) {
      for (int p = 0; p < kc; ++p) {
        const float* src = b + static_cast<std::ptrdiff_t>(p0 + p) * ldb + j0 + jr;
        float* out = dst + p * kNr;
        if (cols == kNr) {
          _mm256_storeu_ps(out, _mm256_loadu_ps(src));
          _mm256_storeu_ps(out + 8, _mm256_loadu_ps(src + 8));
        } else {
          for (int c = 0; c < cols; ++c) out[c] = src[c];
          for (int c = cols; c < kNr; ++c) out[c] = 0.0f;
        }
      }
    } else {
      const float* src[kNr];
      for (int c = 0; c < cols; ++c) src[c] = b + static_cast<std::ptrdiff_t>(j0 + jr + c) * ldb + p0;
      for (int p = 0; p < kc; ++p) {
        float* out = dst + p * kNr;
        for (int c = 0; c < cols; ++c) out[c] = src[c][p];
        for (int c = cols; c < kNr; ++c) out[c] = 0.0f;
      }
    }
    dst += static_cast<std::ptrdiff_t>(kc) * kNr;
  }
}

// bp advances by `bstride` per k step: kNr for packed slivers, ldb when a
// full-width sliver is read straight from row-major B.
inline __attribute__((always_inline)) void micro_kernel(int kc, const float* ap, const float* bp,
                                                        std::ptrdiff_t bstride, float alpha, float* c, int ldc,
                                                        int rows, int cols) {
  __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
  __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
  __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
  __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
  __m256 c40 = _mm256_setzero_ps(), c41 = _mm256_setzero_ps();
  __m256 c50 = _mm256_setzero_ps(), c51 = _mm256_setzero_ps();

  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
    __m256 a = _mm256_broadcast_ss(ap + 0);
    c00 = _mm256_fmadd_ps(a, b0, c00);
    c01 = _mm256_fmadd_ps(a, b1, c01);
    a = _mm256_broadcast_ss(ap + 1);
    c10 = _mm256_fmadd_ps(a, b0, c10);
    c11 = _mm256_fmadd_ps(a, b1, c11);
    a = _mm256_broadcast_ss(ap + 2);
    c20 = _mm256_fmadd_ps(a, b0, c20);
    c21 = _mm256_fmadd_ps(a, b1, c21);
    a = _mm256_broadcast_ss(ap + 3);
    c30 = _mm256_fmadd_ps(a, b0, c30);
    c31 = _mm256_fmadd_ps(a, b1, c31);
    a = _mm256_broadcast_ss(ap + 4);
    c40 = _mm256_fmadd_ps(a, b0, c40);
    c41 = _mm256_fmadd_ps(a, b1, c41);
    a = _mm256_broadcast_ss(ap + 5);
    c50 = _mm256_fmadd_ps(a, b0, c50);
    c51 = _mm256_fmadd_ps(a, b1, c51);
    ap += kMr;
    bp += bstride;
  }

  const __m256 va = _mm256_set1_ps(alpha);
  if (rows == kMr && cols == kNr) {
    const __m256 acc[kMr][2] = {{c00, c01}, {c10, c11}, {c20, c21}, {c30, c31}, {c40, c41}, {c50, c51}};
    for (int r = 0; r < kMr; ++r) {
      float* crow = c + static_cast<std::ptrdiff_t>(r) * ldc;
      _mm256_storeu_ps(crow, _mm256_add_ps(_mm256_loadu_ps(crow), _mm256_mul_ps(va, acc[r][0])));
      _mm256_storeu_ps(crow + 8, _mm256_add_ps(_mm256_loadu_ps(crow + 8), _mm256_mul_ps(va, acc[r][1])));
    }
    return;
  }
  alignas(32) float tile[kMr * kNr];
  _mm256_store_ps(tile + 0 * kNr, _mm256_mul_ps(va, c00));
  _mm256_store_ps(tile + 0 * kNr + 8, _mm256_mul_ps(va, c01));
  _mm256_store_ps(tile + 1 * kNr, _mm256_mul_ps(va, c10));
  _mm256_store_ps(tile + 1 * kNr + 8, _mm256_mul_ps(va, c11));
  _mm256_store_ps(tile + 2 * kNr, _mm256_mul_ps(va, c20));
  _mm256_store_ps(tile + 2 * kNr + 8, _mm256_mul_ps(va, c21));
  _mm256_store_ps(tile + 3 * kNr, _mm256_mul_ps(va, c30));
  _mm256_store_ps(tile + 3 * kNr + 8, _mm256_mul_ps(va, c31));
  _mm256_store_ps(tile + 4 * kNr, _mm256_mul_ps(va, c40));
  _mm256_store_ps(tile + 4 * kNr + 8, _mm256_mul_ps(va, c41));
  _mm256_store_ps(tile + 5 * kNr, _mm256_mul_ps(va, c50));
  _mm256_store_ps(tile + 5 * kNr + 8, _mm256_mul_ps(va, c51));

  if (cols == kNr) {
    for (int r = 0; r < rows; ++r) {
      float* crow = c + static_cast<std::ptrdiff_t>(r) * ldc;
      _mm256_storeu_ps(crow, _mm256_add_ps(_mm256_loadu_ps(crow), _mm256_load_ps(tile + r * kNr)));
      _mm256_storeu_ps(crow + 8,
                       _mm256_add_ps(_mm256_loadu_ps(crow + 8), _mm256_load_ps(tile + r * kNr + 8)));
    }
  } else {
    for (int r = 0; r < rows; ++r) {
      float* crow = c + static_cast<std::ptrdiff_t>(r) * ldc;
      for (int j = 0; j < cols; ++j) crow[j] += tile[r * kNr + j];
    }
  }
}

void scale_c(int m, int n, float beta, float* c, int ldc) {
  if (beta == 1.0f) return;
  for (int i = 0; i < m; ++i) {
    float* row = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == 0.0f) {
      std::memset(row, 0, sizeof(float) * static_cast<std::size_t>(n));
    } else {
      const __m256 vb = _mm256_set1_ps(beta);
      int j = 0;
      for (; j + 8 <= n; j += 8) _mm256_storeu_ps(row + j, _mm256_mul_ps(vb, _mm256_loadu_ps(row + j)));
      for (; j < n; ++j) row[j] *= beta;
    }
  }
}

void gemm_avx2(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
               const float* b, int ldb, float beta, float* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  scale_c(m, n, beta, c, ldc);
  if (alpha == 0.0f || k <= 0) return;

  PackBuffers& buf = buffers();
  // Row-major B is read in place for full 16-wide slivers; only transposed B
  // and ragged right edges go through the packing buffer.
  const bool direct_b = !tb;
  for (int jc = 0; jc < n; jc += kNc) {
    const int nc = std::min(kNc, n - jc);
    for (int pc = 0; pc < k; pc += kKc) {
      const int kc = std::min(kKc, k - pc);
      const int full = direct_b ? (nc / kNr) * kNr : 0;
      if (direct_b) {
        if (full < nc) pack_b(false, b, ldb, pc, jc + full, kc, nc - full, buf.b.data());
      } else {
        pack_b(tb, b, ldb, pc, jc, kc, nc, buf.b.data());
      }
      for (int ic = 0; ic < m; ic += kMc) {
        const int mc = std::min(kMc, m - ic);
        pack_a(ta, a, lda, ic, pc, mc, kc, buf.a.data());
        for (int jr = 0; jr < nc; jr += kNr) {
          const int cols = std::min(kNr, nc - jr);
          const float* bp;
          std::ptrdiff_t bstride = kNr;
          if (direct_b && jr < full) {
            bp = b + static_cast<std::ptrdiff_t>(pc) * ldb + jc + jr;
            bstride = ldb;
          } else if (direct_b) {
            bp = buf.b.data();
          } else {
            bp = buf.b.data() + static_cast<std::ptrdiff_t>(jr / kNr) * kc * kNr;
          }
          for (int ir = 0; ir < mc; ir += kMr) {
            const int rows = std::min(kMr, mc - ir);
            const float* ap = buf.a.data() + static_cast<std::ptrdiff_t>(ir / kMr) * kc * kMr;
            float* cblk = c + static_cast<std::ptrdiff_t>(ic + ir) * ldc + jc + jr;
            micro_kernel(kc, ap, bp, bstride, alpha, cblk, ldc, rows, cols);
          }
        }
      }
    }
  }
}

void axpy_avx2(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu_forward_avx2(std::size_t n, const float* x, float* y) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_backward_avx2(std::size_t n, const float* x, const float* dy, float* dx) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(dx + i, _mm256_and_ps(mask, _mm256_loadu_ps(dy + i)));
  }
  for (; i < n; ++i) dx[i] = x[i] > 0.0f ? dy[i] : 0.0f;
}

void scale_shift_avx2(std::size_t n, const float* x, float scale, float shift, float* y) {
  const __m256 vs = _mm256_set1_ps(scale);
  const __m256 vb = _mm256_set1_ps(shift);
  std::size_t i = 0;
  // mul + add rather than fma so results match the scalar reference exactly.
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_mul_ps(_mm256_loadu_ps(x + i), vs), vb));
  }
  for (; i < n; ++i) y[i] = x[i] * scale + shift;
}

double hsum(__m256d v) {
  alignas(32) double t[4];
  _mm256_store_pd(t, v);
  return (t[0] + t[1]) + (t[2] + t[3]);
}

void sum_sumsq_avx2(std::size_t n, const float* x, double* sum, double* sumsq) {
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  __m256d q0 = _mm256_setzero_pd(), q1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
    const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
    s0 = _mm256_add_pd(s0, lo);
    s1 = _mm256_add_pd(s1, hi);
    q0 = _mm256_fmadd_pd(lo, lo, q0);
    q1 = _mm256_fmadd_pd(hi, hi, q1);
  }
  double s = hsum(_mm256_add_pd(s0, s1));
  double q = hsum(_mm256_add_pd(q0, q1));
  for (; i < n; ++i) {
    const double v = x[i];
    s += v;
    q += v * v;
  }
  *sum = s;
  *sumsq = q;
}

double dot_avx2(std::size_t n, const float* x, const float* y) {
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 vx = _mm256_loadu_ps(x + i);
    const __m256 vy = _mm256_loadu_ps(y + i);
    s0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(vx)),
                         _mm256_cvtps_pd(_mm256_castps256_ps128(vy)), s0);
    s1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(vx, 1)),
                         _mm256_cvtps_pd(_mm256_extractf128_ps(vy, 1)), s1);
  }
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return s;
}

const KernelTable kAvx2{
    Isa::avx2,      &gemm_avx2,       &axpy_avx2,     &relu_forward_avx2, &relu_backward_avx2,
    &scale_shift_avx2, &sum_sumsq_avx2, &dot_avx2,
};

}  // namespace

const KernelTable* avx2_table() { return &kAvx2; }

}  // namespace fgss::simd::detail
