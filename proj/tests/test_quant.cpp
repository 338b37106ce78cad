#include <doctest.h>

#include <cmath>
#include <random>

#include "bitmix/quant.hpp"
#include "testutil.hpp"

using namespace bitmix;
using testutil::fd_grad;
using testutil::max_rel_err;

TEST_CASE("quantize: exact grid point passes through") {
    Graph g;
    auto x = scalar(real_t(0.5));
    auto spec = make_quant_spec(2, false, real_t(0.25));
    auto y = quantize(g, x, spec);
    CHECK(y->data[0] == real_t(0.5));
}

TEST_CASE("quantize: clip saturation value and zero STE gradient") {
    Graph g;
    auto x = scalar(10.0, true);
    auto spec = make_quant_spec(2, false, real_t(0.25));
    auto y = quantize(g, x, spec);
    CHECK(y->data[0] == real_t(0.75));
    g.backward(ops::sum(g, y));
    CHECK(x->grad[0] == 0);
}

TEST_CASE("quantize: errors on bad spec") {
    Graph g;
    auto x = scalar(1.0);
    CHECK_THROWS(make_quant_spec(1, false, 1));
    CHECK_THROWS(make_quant_spec(4, false, 0));
    auto spec = make_quant_spec(4, false, 1);
    spec.step->data[0] = -1;
    CHECK_THROWS(quantize(g, x, spec));
}

TEST_CASE("quantize: STE gradient w.r.t. x is exactly 1 in range, 0 clipped") {
    auto x = from_data({6}, {real_t(-0.2), real_t(0.1), real_t(0.9),
                             real_t(2.99), real_t(3.01), real_t(7.0)},
                       true);
    auto spec = make_quant_spec(2, false, 1);  // range [0, 3]
    Graph g;
    auto y = quantize(g, x, spec);
    g.backward(ops::sum(g, y));
    CHECK(x->grad == std::vector<real_t>{0, 1, 1, 1, 0, 0});
}

TEST_CASE("quantize: step gradient equals the LSQ formula element-wise") {
    std::mt19937_64 rng(21);
    auto x = randn({12}, rng, 2);
    for (bool lsq_scale : {true, false}) {
        for (bool is_signed : {false, true}) {
            CAPTURE(lsq_scale);
            CAPTURE(is_signed);
            auto spec = make_quant_spec(3, is_signed, real_t(0.6), true,
                                        lsq_scale);
            const real_t s = spec.step_value();
            const real_t qmin = spec.qmin(), qmax = spec.qmax();
            const real_t scale =
                lsq_scale ? real_t(1) / std::sqrt(real_t(12) * qmax)
                          : real_t(1);
            for (size_t i = 0; i < 12; ++i) {
                // One-hot upstream isolates element i's contribution.
                spec.step->zero_grad();
                Graph g;
                auto y = quantize(g, x, spec);
                std::vector<real_t> onehot(12, 0);
                onehot[i] = 1;
                g.backward(ops::dot_const(g, y, onehot));
                const real_t z = x->data[i] / s;
                real_t want;
                if (z < qmin) want = qmin;
                else if (z > qmax) want = qmax;
                else want = std::nearbyint(z) - z;
                CHECK(spec.step->grad[0] == scale * want);
            }
        }
    }
}

TEST_CASE("quantize: step gradient matches FD of the straight-through "
          "surrogate away from rounding boundaries") {
    std::mt19937_64 rng(22);
    auto x = randn({64}, rng, 2);
    auto spec = make_quant_spec(3, false, real_t(0.37), true, false);
    const real_t s0 = spec.step_value();
    const real_t qmin = spec.qmin(), qmax = spec.qmax();
    // Keep every element at least 1e-6 levels away from a rounding edge.
    for (auto& v : x->data) {
        const real_t z = v / s0;
        if (std::abs(z - std::nearbyint(z)) > real_t(0.5) - real_t(1e-6) &&
            z >= qmin && z <= qmax)
            v += real_t(0.01) * s0;
    }
    auto upstream = testutil::random_vec(64, rng);

    spec.step->zero_grad();
    {
        Graph g;
        auto y = quantize(g, x, spec);
        g.backward(ops::dot_const(g, y, std::vector<real_t>(upstream)));
    }
    const real_t got = spec.step->grad[0];

    // Surrogate: rounding residuals frozen at the base step, so the
    // non-differentiable part does not move under the FD perturbation.
    std::vector<real_t> frozen(64);
    for (size_t i = 0; i < 64; ++i) {
        const real_t z = x->data[i] / s0;
        if (z < qmin) frozen[i] = qmin;
        else if (z > qmax) frozen[i] = qmax;
        else frozen[i] = std::nearbyint(z);
    }
    auto surrogate = [&](real_t s) {
        real_t acc = 0;
        for (size_t i = 0; i < 64; ++i) {
            const real_t z = x->data[i] / s0;
            const real_t y = (z < qmin || z > qmax)
                                 ? s * frozen[i]
                                 : x->data[i] + s * (frozen[i] - z);
            acc += upstream[i] * y;
        }
        return acc;
    };
    const real_t h = real_t(1e-5);
    const real_t fd = (surrogate(s0 + h) - surrogate(s0 - h)) / (2 * h);
    CHECK(std::abs(got - fd) / std::max<real_t>(std::abs(fd), 1) < 1e-3);
}

TEST_CASE("init_step: degenerate and direct-formula cases") {
    std::vector<real_t> zeros(8, 0);
    CHECK(init_step(zeros, 4, false) == 1.0);
    std::vector<real_t> ones{1, 1, 1, 1};
    CHECK(init_step(ones, 2, false) ==
          doctest::Approx(2.0 / std::sqrt(3.0)).epsilon(1e-12));
    CHECK_THROWS(init_step(std::span<const real_t>{}, 4, false));
    CHECK_THROWS(init_step(ones, 1, false));
}

TEST_CASE("init_step: standard normal Monte-Carlo matches E|N(0,1)|") {
    std::mt19937_64 rng(23);
    auto sample = testutil::random_vec(100000, rng);
    const real_t got = init_step(sample, 4, false);
    const real_t want = 2 * std::sqrt(real_t(2) / std::numbers::pi_v<real_t>) /
                        std::sqrt(real_t(15));
    CHECK(std::abs(got - want) / want < 0.02);
}

TEST_CASE("quantize_weights: grid points and signed clamp") {
    Graph g;
    auto w = from_data({3}, {real_t(-0.25), 0, real_t(0.25)});
    auto spec = make_quant_spec(4, true, real_t(0.25));
    auto y = quantize_weights(g, w, spec);
    CHECK(y->data == w->data);

    auto w2 = scalar(real_t(1.6));
    auto spec2 = make_quant_spec(2, true, 1);
    CHECK(quantize_weights(g, w2, spec2)->data[0] == 1.0);

    auto unsigned_spec = make_quant_spec(4, false, 1);
    CHECK_THROWS(quantize_weights(g, w, unsigned_spec));
}

TEST_CASE("quantize_weights: max error <= step/2 on a dense in-range grid") {
    Graph g;
    const real_t step = real_t(0.3);
    auto spec = make_quant_spec(4, true, step);
    const real_t lo = spec.qmin() * step, hi = spec.qmax() * step;
    const int n = 2000;
    std::vector<real_t> grid(n);
    for (int i = 0; i < n; ++i)
        grid[i] = lo + (hi - lo) * static_cast<real_t>(i) / (n - 1);
    auto w = from_data({n}, std::move(grid));
    auto y = quantize_weights(g, w, spec);
    for (int i = 0; i < n; ++i)
        CHECK(std::abs(y->data[i] - w->data[i]) <= step / 2 + 1e-12);
}

TEST_CASE("quantize properties: idempotence, bounded error, monotonicity, "
          "range width") {
    std::mt19937_64 rng(24);
    for (int bits : {2, 3, 4, 8}) {
        for (bool is_signed : {false, true}) {
            CAPTURE(bits);
            CAPTURE(is_signed);
            auto spec = make_quant_spec(bits, is_signed, real_t(0.17));
            const real_t step = spec.step_value();
            Graph g;
            auto x = randn({512}, rng, 2);
            auto y = quantize(g, x, spec);
            auto yy = quantize(g, y, spec);
            CHECK(y->data == yy->data);  // idempotence

            const real_t lo = spec.qmin() * step, hi = spec.qmax() * step;
            for (size_t i = 0; i < 512; ++i) {
                const real_t clamped =
                    std::min(std::max(x->data[i], lo), hi);
                CHECK(std::abs(y->data[i] - clamped) <= step / 2 + 1e-12);
            }
            // Monotonicity over sorted inputs.
            auto sorted = x->data;
            std::sort(sorted.begin(), sorted.end());
            auto xs = from_data({512}, std::move(sorted));
            auto ys = quantize(g, xs, spec);
            for (size_t i = 1; i < 512; ++i)
                CHECK(ys->data[i] >= ys->data[i - 1]);
            // Range spans exactly 2^bits - 1 levels of size step.
            CHECK(spec.qmax() - spec.qmin() ==
                  static_cast<real_t>((i64(1) << bits) - 1));
            CHECK((spec.qmax() - spec.qmin()) * step ==
                  ((i64(1) << bits) - 1) * step);
        }
    }
}

TEST_CASE("quantize: variance of quantized Gaussian decreases with bits") {
    std::mt19937_64 rng(0);
    const i64 n = 1000000;
    auto x = randn({n}, rng);
    Graph g;
    NoGrad ng(g);
    real_t prev = std::numeric_limits<real_t>::infinity();
    for (int bits : {2, 3, 4, 8}) {
        auto spec = make_quant_spec(bits, true, 1, false);
        set_step(spec, init_step(x->data, bits, true));
        auto q = quantize(g, x, spec);
        real_t m = 0;
        for (real_t v : q->data) m += v;
        m /= n;
        real_t var = 0;
        for (real_t v : q->data) var += (v - m) * (v - m);
        var /= n;
        CHECK(var < prev);
        prev = var;
        if (bits == 8) CHECK(var >= real_t(0.99));
    }
}

TEST_CASE("clamp_step restores the positivity floor") {
    auto spec = make_quant_spec(4, false, 1);
    spec.step->data[0] = -3;
    clamp_step(spec);
    CHECK(spec.step->data[0] == real_t(1e-8));
}
