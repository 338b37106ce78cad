#include <algorithm>
#include <cmath>
#include <cstring>

#include "bitmix/kernels.hpp"

namespace bitmix::kern {
namespace {

void add_ref(const real_t* a, const real_t* b, real_t* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void mul_ref(const real_t* a, const real_t* b, real_t* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

void axpy_ref(real_t a, const real_t* x, real_t* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scal_ref(real_t a, real_t* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] *= a;
}

real_t dot_ref(const real_t* a, const real_t* b, size_t n) {
    real_t s = 0;
    for (size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

real_t sum_ref(const real_t* x, size_t n) {
    real_t s = 0;
    for (size_t i = 0; i < n; ++i) s += x[i];
    return s;
}

void scale_c(real_t beta, real_t* c, i64 m, i64 n, i64 ldc) {
    if (beta == real_t(1)) return;
    for (i64 i = 0; i < m; ++i) {
        real_t* row = c + i * ldc;
        if (beta == real_t(0)) {
            std::memset(row, 0, sizeof(real_t) * static_cast<size_t>(n));
        } else {
            for (i64 j = 0; j < n; ++j) row[j] *= beta;
        }
    }
}

void gemm_ref(bool ta, bool tb, i64 m, i64 n, i64 k, real_t alpha,
              const real_t* a, i64 lda, const real_t* b, i64 ldb,
              real_t beta, real_t* c, i64 ldc) {
    scale_c(beta, c, m, n, ldc);
    if (alpha == real_t(0) || m == 0 || n == 0 || k == 0) return;
    if (!ta && !tb) {
        for (i64 i = 0; i < m; ++i) {
            real_t* crow = c + i * ldc;
            for (i64 p = 0; p < k; ++p) {
                const real_t av = alpha * a[i * lda + p];
                if (av == real_t(0)) continue;
                const real_t* brow = b + p * ldb;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!ta && tb) {
        for (i64 i = 0; i < m; ++i) {
            const real_t* arow = a + i * lda;
            real_t* crow = c + i * ldc;
            for (i64 j = 0; j < n; ++j) {
                const real_t* brow = b + j * ldb;
                real_t s = 0;
                for (i64 p = 0; p < k; ++p) s += arow[p] * brow[p];
                crow[j] += alpha * s;
            }
        }
    } else if (ta && !tb) {
        for (i64 p = 0; p < k; ++p) {
            const real_t* brow = b + p * ldb;
            for (i64 i = 0; i < m; ++i) {
                const real_t av = alpha * a[p * lda + i];
                if (av == real_t(0)) continue;
                real_t* crow = c + i * ldc;
                for (i64 j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (i64 i = 0; i < m; ++i) {
            real_t* crow = c + i * ldc;
            for (i64 j = 0; j < n; ++j) {
                real_t s = 0;
                for (i64 p = 0; p < k; ++p) s += a[p * lda + i] * b[j * ldb + p];
                crow[j] += alpha * s;
            }
        }
    }
}

void fq_forward_ref(const real_t* x, real_t* y, size_t n, real_t step,
                    real_t qmin, real_t qmax) {
    for (size_t i = 0; i < n; ++i) {
        const real_t z = std::nearbyint(x[i] / step);
        y[i] = step * std::min(std::max(z, qmin), qmax);
    }
}

void fq_backward_ref(const real_t* x, const real_t* gy, real_t* gx, size_t n,
                     real_t step, real_t qmin, real_t qmax, real_t* gstep) {
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

const Ops& reference_ops() {
    static const Ops table = {
        "scalar", add_ref,  mul_ref,        axpy_ref,        scal_ref,
        dot_ref,  sum_ref,  gemm_ref,       fq_forward_ref,  fq_backward_ref,
    };
    return table;
}

}  // namespace bitmix::kern
