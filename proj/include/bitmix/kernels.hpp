#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bitmix/common.hpp"

namespace bitmix::kern {

// Hot inner loops, dispatched at runtime. Every entry has a scalar
// reference implementation and (on x86-64 with AVX2+FMA) a vector variant;
// the two are equivalence-tested against each other. Elementwise kernels
// are bit-identical across variants, reductions and GEMM agree to roundoff
// (association differs).
struct Ops {
    const char* name;

    // y[i] = a[i] + b[i]
    void (*add)(const real_t* a, const real_t* b, real_t* y, size_t n);
    // y[i] = a[i] * b[i]
    void (*mul)(const real_t* a, const real_t* b, real_t* y, size_t n);
    // y[i] += a * x[i]
    void (*axpy)(real_t a, const real_t* x, real_t* y, size_t n);
    // x[i] *= a
    void (*scal)(real_t a, real_t* x, size_t n);
    real_t (*dot)(const real_t* a, const real_t* b, size_t n);
    real_t (*sum)(const real_t* x, size_t n);

    // Row-major C = alpha * op(A) * op(B) + beta * C.
    // op(A) is M x K, op(B) is K x N, C is M x N.
    void (*gemm)(bool trans_a, bool trans_b, i64 m, i64 n, i64 k,
                 real_t alpha, const real_t* a, i64 lda, const real_t* b,
                 i64 ldb, real_t beta, real_t* c, i64 ldc);

    // Uniform fake-quantization forward:
    //   y[i] = step * clamp(nearbyint(x[i] / step), qmin, qmax)
    void (*fq_forward)(const real_t* x, real_t* y, size_t n, real_t step,
                       real_t qmin, real_t qmax);

    // Backward of fq_forward. With z = x/step:
    //   gx[i]    += gy[i] where qmin <= z <= qmax, else 0   (STE; gx may be null)
    //   *gstep   += sum_i gy[i] * d_i,
    //       d_i = nearbyint(z)-z in range, qmin below, qmax above.
    void (*fq_backward)(const real_t* x, const real_t* gy, real_t* gx,
                        size_t n, real_t step, real_t qmin, real_t qmax,
                        real_t* gstep);
};

const Ops& reference_ops();
const Ops* avx2_ops();  // null when not compiled in or CPU lacks AVX2/FMA

// Active table. Defaults to the best supported variant; BITMIX_KERNELS
// (scalar|avx2|auto) overrides at startup, select() overrides at runtime.
const Ops& ops();
void select(const std::string& name);
std::vector<std::string> available();

}  // namespace bitmix::kern
