// AVX2+FMA kernel variants. This file is compiled with -mavx2 -mfma on
// x86-64; callers must gate on runtime CPU support (see kernels.cpp).

#include "bitmix/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define BITMIX_HAVE_AVX2_TU 1
#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#endif

namespace bitmix::kern {

#if BITMIX_HAVE_AVX2_TU
namespace {

#ifdef BITMIX_REAL32
using vreal = __m256;
constexpr size_t kLanes = 8;
inline vreal vload(const real_t* p) { return _mm256_loadu_ps(p); }
inline void vstore(real_t* p, vreal v) { _mm256_storeu_ps(p, v); }
inline vreal vset1(real_t v) { return _mm256_set1_ps(v); }
inline vreal vadd(vreal a, vreal b) { return _mm256_add_ps(a, b); }
inline vreal vmul(vreal a, vreal b) { return _mm256_mul_ps(a, b); }
inline vreal vdiv(vreal a, vreal b) { return _mm256_div_ps(a, b); }
inline vreal vfma(vreal a, vreal b, vreal c) { return _mm256_fmadd_ps(a, b, c); }
inline vreal vmin(vreal a, vreal b) { return _mm256_min_ps(a, b); }
inline vreal vmax(vreal a, vreal b) { return _mm256_max_ps(a, b); }
inline vreal vround(vreal a) {
    return _mm256_round_ps(a, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
}
inline real_t vhsum(vreal v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
}
#else
using vreal = __m256d;
constexpr size_t kLanes = 4;
inline vreal vload(const real_t* p) { return _mm256_loadu_pd(p); }
inline void vstore(real_t* p, vreal v) { _mm256_storeu_pd(p, v); }
inline vreal vset1(real_t v) { return _mm256_set1_pd(v); }
inline vreal vadd(vreal a, vreal b) { return _mm256_add_pd(a, b); }
inline vreal vmul(vreal a, vreal b) { return _mm256_mul_pd(a, b); }
inline vreal vdiv(vreal a, vreal b) { return _mm256_div_pd(a, b); }
inline vreal vfma(vreal a, vreal b, vreal c) { return _mm256_fmadd_pd(a, b, c); }
inline vreal vmin(vreal a, vreal b) { return _mm256_min_pd(a, b); }
inline vreal vmax(vreal a, vreal b) { return _mm256_max_pd(a, b); }
inline vreal vround(vreal a) {
    return _mm256_round_pd(a, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
}
inline real_t vhsum(vreal v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}
#endif

void add_avx2(const real_t* a, const real_t* b, real_t* y, size_t n) {
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        vstore(y + i, vadd(vload(a + i), vload(b + i)));
    for (; i < n; ++i) y[i] = a[i] + b[i];
}

void mul_avx2(const real_t* a, const real_t* b, real_t* y, size_t n) {
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        vstore(y + i, vmul(vload(a + i), vload(b + i)));
    for (; i < n; ++i) y[i] = a[i] * b[i];
}

void axpy_avx2(real_t a, const real_t* x, real_t* y, size_t n) {
    const vreal va = vset1(a);
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        vstore(y + i, vfma(va, vload(x + i), vload(y + i)));
    for (; i < n; ++i) y[i] += a * x[i];
}

void scal_avx2(real_t a, real_t* x, size_t n) {
    const vreal va = vset1(a);
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) vstore(x + i, vmul(va, vload(x + i)));
    for (; i < n; ++i) x[i] *= a;
}

real_t dot_avx2(const real_t* a, const real_t* b, size_t n) {
    vreal acc = vset1(0);
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        acc = vfma(vload(a + i), vload(b + i), acc);
    real_t s = vhsum(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

real_t sum_avx2(const real_t* x, size_t n) {
    vreal acc = vset1(0);
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) acc = vadd(acc, vload(x + i));
    real_t s = vhsum(acc);
    for (; i < n; ++i) s += x[i];
    return s;
}

void scale_c(real_t beta, real_t* c, i64 m, i64 n, i64 ldc) {
    if (beta == real_t(1)) return;
    for (i64 i = 0; i < m; ++i) {
        real_t* row = c + i * ldc;
        if (beta == real_t(0)) {
            std::memset(row, 0, sizeof(real_t) * static_cast<size_t>(n));
        } else {
            scal_avx2(beta, row, static_cast<size_t>(n));
        }
    }
}

void gemm_avx2(bool ta, bool tb, i64 m, i64 n, i64 k, real_t alpha,
               const real_t* a, i64 lda, const real_t* b, i64 ldb,
               real_t beta, real_t* c, i64 ldc) {
    if (ta && tb) {  // unused by the tensor ops; keep the reference path
        reference_ops().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c,
                             ldc);
        return;
    }
    scale_c(beta, c, m, n, ldc);
    if (alpha == real_t(0) || m == 0 || n == 0 || k == 0) return;
    if (!ta && !tb) {
        for (i64 i = 0; i < m; ++i) {
            real_t* crow = c + i * ldc;
            for (i64 p = 0; p < k; ++p) {
                const real_t av = alpha * a[i * lda + p];
                if (av == real_t(0)) continue;
                axpy_avx2(av, b + p * ldb, crow, static_cast<size_t>(n));
            }
        }
    } else if (!ta && tb) {
        for (i64 i = 0; i < m; ++i) {
            const real_t* arow = a + i * lda;
            real_t* crow = c + i * ldc;
            for (i64 j = 0; j < n; ++j)
                crow[j] += alpha * dot_avx2(arow, b + j * ldb,
                                            static_cast<size_t>(k));
        }
    } else {  // ta && !tb
        for (i64 p = 0; p < k; ++p) {
            const real_t* brow = b + p * ldb;
            for (i64 i = 0; i < m; ++i) {
                const real_t av = alpha * a[p * lda + i];
                if (av == real_t(0)) continue;
                axpy_avx2(av, brow, c + i * ldc, static_cast<size_t>(n));
            }
        }
    }
}

void fq_forward_avx2(const real_t* x, real_t* y, size_t n, real_t step,
                     real_t qmin, real_t qmax) {
    const vreal vstep = vset1(step);
    const vreal vqmin = vset1(qmin);
    const vreal vqmax = vset1(qmax);
    size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        vreal z = vround(vdiv(vload(x + i), vstep));
        z = vmax(vmin(z, vqmax), vqmin);
        vstore(y + i, vmul(vstep, z));
    }
    for (; i < n; ++i) {
        const real_t z = std::nearbyint(x[i] / step);
        y[i] = step * std::min(std::max(z, qmin), qmax);
    }
}

void fq_backward_avx2(const real_t* x, const real_t* gy, real_t* gx, size_t n,
                      real_t step, real_t qmin, real_t qmax, real_t* gstep) {
    // Branch-heavy per element; the reduction dominates. Scalar loop with
    // the same per-element arithmetic as the reference keeps gx bit-equal.
    real_t gs = 0;
    for (size_t i = 0; i < n; ++i) {
        const real_t z = x[i] / step;
        real_t d;
        real_t pass;
        if (z < qmin) {
            d = qmin;
            pass = 0;
        } else if (z > qmax) {
            d = qmax;
            pass = 0;
        } else {
            d = std::nearbyint(z) - z;
            pass = 1;
        }
        if (gx) gx[i] += pass * gy[i];
        gs += gy[i] * d;
    }
    if (gstep) *gstep += gs;
}

}  // namespace

const Ops* avx2_ops() {
    if (!__builtin_cpu_supports("avx2") || !__builtin_cpu_supports("fma"))
        return nullptr;
    static const Ops table = {
        "avx2",    add_avx2, mul_avx2,  axpy_avx2,        scal_avx2,
        dot_avx2,  sum_avx2, gemm_avx2, fq_forward_avx2,  fq_backward_avx2,
    };
    return &table;
}

#else

const Ops* avx2_ops() { return nullptr; }

#endif  // BITMIX_HAVE_AVX2_TU

}  // namespace bitmix::kern
