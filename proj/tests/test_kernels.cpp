#include <doctest.h>

#include <cmath>
#include <random>

#include "bitmix/kernels.hpp"
#include "testutil.hpp"

using namespace bitmix;

namespace {

// Element-order-independent tolerance for reductions and GEMM.
constexpr real_t kReduceTol = sizeof(real_t) == 8 ? 1e-12 : 1e-4;

std::vector<real_t> naive_gemm(bool ta, bool tb, i64 m, i64 n, i64 k,
                               const std::vector<real_t>& a,
                               const std::vector<real_t>& b) {
    std::vector<real_t> c(static_cast<size_t>(m * n), 0);
    for (i64 i = 0; i < m; ++i)
        for (i64 j = 0; j < n; ++j) {
            real_t s = 0;
            for (i64 p = 0; p < k; ++p) {
                const real_t av = ta ? a[p * m + i] : a[i * k + p];
                const real_t bv = tb ? b[j * k + p] : b[p * n + j];
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    return c;
}

}  // namespace

TEST_CASE("reference gemm matches a naive triple loop") {
    std::mt19937_64 rng(7);
    const auto& ops = kern::reference_ops();
    for (auto [ta, tb] : {std::pair{false, false}, {false, true},
                          {true, false}, {true, true}}) {
        const i64 m = 7, n = 9, k = 5;
        auto a = testutil::random_vec(static_cast<size_t>(m * k), rng);
        auto b = testutil::random_vec(static_cast<size_t>(k * n), rng);
        std::vector<real_t> c(static_cast<size_t>(m * n), real_t(0.5));
        ops.gemm(ta, tb, m, n, k, 1, a.data(), ta ? m : k, b.data(),
                 tb ? k : n, 0, c.data(), n);
        const auto want = naive_gemm(ta, tb, m, n, k, a, b);
        CHECK(testutil::max_rel_err(c, want) < kReduceTol);
    }
}

TEST_CASE("gemm alpha/beta accumulate") {
    const auto& ops = kern::reference_ops();
    std::vector<real_t> a{1, 2, 3, 4};  // 2x2
    std::vector<real_t> b{1, 0, 0, 1};
    std::vector<real_t> c{10, 10, 10, 10};
    ops.gemm(false, false, 2, 2, 2, 2, a.data(), 2, b.data(), 2, 1, c.data(),
             2);
    CHECK(c[0] == doctest::Approx(12));
    CHECK(c[1] == doctest::Approx(14));
    CHECK(c[2] == doctest::Approx(16));
    CHECK(c[3] == doctest::Approx(18));
}

TEST_CASE("fake-quant forward matches hand values") {
    const auto& ops = kern::reference_ops();
    std::vector<real_t> x{0.5, 10.0, -1.0};
    std::vector<real_t> y(3);
    ops.fq_forward(x.data(), y.data(), 3, real_t(0.25), 0, 3);
    CHECK(y[0] == real_t(0.5));    // grid point
    CHECK(y[1] == real_t(0.75));   // clipped to 3 levels * 0.25
    CHECK(y[2] == real_t(0));      // clipped below
}

TEST_CASE("fake-quant backward: STE mask and step terms") {
    const auto& ops = kern::reference_ops();
    // step 1, unsigned 2-bit: range [0, 3]
    std::vector<real_t> x{0.4, 2.6, -1.0, 5.0};
    std::vector<real_t> gy{1, 1, 1, 1};
    std::vector<real_t> gx(4, 0);
    real_t gs = 0;
    ops.fq_backward(x.data(), gy.data(), gx.data(), 4, 1, 0, 3, &gs);
    CHECK(gx[0] == 1);  // in range
    CHECK(gx[1] == 1);
    CHECK(gx[2] == 0);  // clipped
    CHECK(gx[3] == 0);
    // d terms: (0-0.4) + (3-2.6) + 0 + 3 = 3.0
    CHECK(gs == doctest::Approx(real_t(-0.4) + real_t(0.4) + 0 + 3));
}

TEST_CASE("avx2 variants agree with the scalar reference") {
    const kern::Ops* avx2 = kern::avx2_ops();
    if (!avx2) {
        MESSAGE("AVX2 unavailable on this CPU; equivalence checks skipped");
        return;
    }
    const auto& ref = kern::reference_ops();
    std::mt19937_64 rng(123);
    for (size_t n : {1UL, 3UL, 4UL, 17UL, 64UL, 1000UL, 4097UL}) {
        auto a = testutil::random_vec(n, rng);
        auto b = testutil::random_vec(n, rng);

        std::vector<real_t> y1(n), y2(n);
        ref.add(a.data(), b.data(), y1.data(), n);
        avx2->add(a.data(), b.data(), y2.data(), n);
        CHECK(y1 == y2);  // elementwise kernels are bit-identical

        ref.mul(a.data(), b.data(), y1.data(), n);
        avx2->mul(a.data(), b.data(), y2.data(), n);
        CHECK(y1 == y2);

        y1 = b;
        y2 = b;
        ref.axpy(real_t(1.7), a.data(), y1.data(), n);
        avx2->axpy(real_t(1.7), a.data(), y2.data(), n);
        CHECK(testutil::max_rel_err(y1, y2) < kReduceTol);

        y1 = a;
        y2 = a;
        ref.scal(real_t(-0.3), y1.data(), n);
        avx2->scal(real_t(-0.3), y2.data(), n);
        CHECK(y1 == y2);

        CHECK(std::abs(ref.dot(a.data(), b.data(), n) -
                       avx2->dot(a.data(), b.data(), n)) <
              kReduceTol * static_cast<real_t>(n));
        CHECK(std::abs(ref.sum(a.data(), n) - avx2->sum(a.data(), n)) <
              kReduceTol * static_cast<real_t>(n));

        ref.fq_forward(a.data(), y1.data(), n, real_t(0.37), -4, 3);
        avx2->fq_forward(a.data(), y2.data(), n, real_t(0.37), -4, 3);
        CHECK(y1 == y2);

        std::vector<real_t> gx1(n, 0), gx2(n, 0);
        real_t gs1 = 0, gs2 = 0;
        ref.fq_backward(a.data(), b.data(), gx1.data(), n, real_t(0.37), -4, 3,
                        &gs1);
        avx2->fq_backward(a.data(), b.data(), gx2.data(), n, real_t(0.37), -4,
                          3, &gs2);
        CHECK(gx1 == gx2);
        CHECK(std::abs(gs1 - gs2) < kReduceTol * static_cast<real_t>(n));
    }

    for (auto [ta, tb] : {std::pair{false, false}, {false, true},
                          {true, false}, {true, true}}) {
        const i64 m = 13, n = 31, k = 8;
        auto a = testutil::random_vec(static_cast<size_t>(m * k), rng);
        auto b = testutil::random_vec(static_cast<size_t>(k * n), rng);
        std::vector<real_t> c1(static_cast<size_t>(m * n), 1);
        auto c2 = c1;
        ref.gemm(ta, tb, m, n, k, real_t(0.9), a.data(), ta ? m : k, b.data(),
                 tb ? k : n, real_t(0.1), c1.data(), n);
        avx2->gemm(ta, tb, m, n, k, real_t(0.9), a.data(), ta ? m : k,
                   b.data(), tb ? k : n, real_t(0.1), c2.data(), n);
        CHECK(testutil::max_rel_err(c1, c2) < kReduceTol * k);
    }
}

TEST_CASE("kernel selection honors explicit requests") {
    kern::select("scalar");
    CHECK(std::string(kern::ops().name) == "scalar");
    if (kern::avx2_ops()) {
        kern::select("avx2");
        CHECK(std::string(kern::ops().name) == "avx2");
    }
    kern::select("auto");
    CHECK_THROWS(kern::select("neon"));
    const auto avail = kern::available();
    CHECK(!avail.empty());
    CHECK(avail[0] == "scalar");
}
