#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "bitmix/tensor.hpp"

namespace testutil {

using bitmix::real_t;
using bitmix::TensorPtr;

// Central finite differences of a scalar-valued function of t's data.
// The function must re-run the full forward from t's current values.
inline std::vector<real_t> fd_grad(const TensorPtr& t,
                                   const std::function<real_t()>& f,
                                   real_t h = real_t(1e-5)) {
    std::vector<real_t> g(t->data.size());
    for (size_t i = 0; i < t->data.size(); ++i) {
        const real_t saved = t->data[i];
        t->data[i] = saved + h;
        const real_t up = f();
        t->data[i] = saved - h;
        const real_t down = f();
        t->data[i] = saved;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

inline real_t max_rel_err(std::span<const real_t> a, std::span<const real_t> b,
                          real_t floor = 1) {
    REQUIRE(a.size() == b.size());
    real_t worst = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const real_t denom =
            std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

inline std::vector<real_t> random_vec(size_t n, std::mt19937_64& rng,
                                      real_t scale = 1) {
    std::normal_distribution<real_t> dist(0, scale);
    std::vector<real_t> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

}  // namespace testutil
