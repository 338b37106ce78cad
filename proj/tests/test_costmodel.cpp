#include <doctest.h>

#include <random>

#include <nlohmann/json.hpp>

#include "bitmix/costmodel.hpp"
#include "testutil.hpp"

using namespace bitmix;

namespace {

LayerSpec conv_layer(const std::string& name, int in_ch, int out_ch, int k,
                     int stride, int groups, QuantRole q) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.name = name;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.k = k;
    l.stride = stride;
    l.pad = k / 2;
    l.groups = groups;
    l.quant = q;
    return l;
}

ModelSpec hand_spec() {
    ModelSpec spec;
    spec.arch = "hand";
    spec.input_ch = 1;
    spec.input_h = 8;
    spec.input_w = 8;
    spec.layers.push_back(
        conv_layer("unit", 1, 1, 3, 1, 1, QuantRole::FixedFirst));
    spec.layers.push_back(
        conv_layer("dw", 16, 16, 3, 1, 16, QuantRole::Searched));
    LayerSpec fc;
    fc.kind = LayerKind::Linear;
    fc.name = "fc";
    fc.in_ch = 512;
    fc.out_ch = 10;
    fc.quant = QuantRole::FixedLast;
    spec.layers.push_back(fc);
    return spec;
}

CostTable two_layer_table() {
    CostTable ct;
    ct.weight_bits = 4;
    ct.layers.push_back({"a", 100, true, 0, 0});
    ct.layers.push_back({"b", 200, true, 0, 0});
    return ct;
}

}  // namespace

TEST_CASE("count_ops: hand-counted conv, depthwise and linear layers") {
    const auto ct = count_ops(hand_spec(), 4, 8);
    REQUIRE(ct.layers.size() == 3);
    CHECK(ct.layers[0].name == "unit");
    CHECK(ct.layers[0].ops == 576);   // 8*8 out * 9 * 1
    CHECK(!ct.layers[0].searched);
    CHECK(ct.layers[0].fixed_act_bits == 8);
    CHECK(ct.layers[1].ops == 9216);  // 16 ch * 64 * 9 * 1
    CHECK(ct.layers[1].searched);
    CHECK(ct.layers[2].ops == 5120);  // 512 * 10
}

TEST_CASE("count_ops: strides shrink the spatial extent deterministically") {
    ModelSpec spec;
    spec.arch = "strided";
    spec.input_ch = 3;
    spec.input_h = 32;
    spec.input_w = 32;
    spec.layers.push_back(
        conv_layer("stem", 3, 8, 3, 2, 1, QuantRole::FixedFirst));
    spec.layers.push_back(
        conv_layer("mid", 8, 8, 3, 1, 1, QuantRole::Searched));
    LayerSpec fc;
    fc.kind = LayerKind::Linear;
    fc.name = "fc";
    fc.in_ch = 8;
    fc.out_ch = 10;
    fc.quant = QuantRole::FixedLast;
    spec.layers.push_back(fc);
    const auto ct = count_ops(spec);
    CHECK(ct.layers[0].ops == i64(8) * 16 * 16 * 9 * 3);
    CHECK(ct.layers[1].ops == i64(8) * 16 * 16 * 9 * 8);
}

TEST_CASE("bops: direct arithmetic and missing-layer error") {
    CostTable ct;
    ct.weight_bits = 4;
    ct.layers.push_back({"only", 100, true, 0, 0});
    BitAssignment a;
    a.entries.push_back({"only", 8, 0, {}});
    CHECK(bops(ct, a) == 3200);

    const auto ct2 = two_layer_table();
    BitAssignment b;
    b.entries.push_back({"a", 8, 0, {}});
    b.entries.push_back({"b", 3, 0, {}});
    CHECK(bops(ct2, b) == 3200 + 2400);

    BitAssignment incomplete;
    incomplete.entries.push_back({"a", 8, 0, {}});
    CHECK_THROWS_WITH_AS(bops(ct2, incomplete), doctest::Contains("missing"),
                         std::runtime_error);
}

TEST_CASE("bops: fixed 8/8 layers contribute op*64 and pair mode uses its "
          "own weight bits") {
    CostTable ct;
    ct.weight_bits = 4;
    ct.layers.push_back({"first", 50, false, 8, 8});
    ct.layers.push_back({"mid", 100, true, 0, 0});
    BitAssignment a;
    a.entries.push_back({"mid", 4, 2, {}});  // pair (4, 2)
    CHECK(bops(ct, a) == 50 * 64 + 100 * 2 * 4);
    CHECK(ct.fixed_bops() == 3200);
}

TEST_CASE("bops: toy network total equals an independent per-layer summation") {
    const auto ct = count_ops(hand_spec(), 4, 8);
    BitAssignment a;
    a.entries.push_back({"dw", 3, 0, {}});
    // Independent summation straight from the table definition.
    i64 want = 0;
    want += 576 * 8 * 8;
    want += 9216 * 4 * 3;
    want += 5120 * 8 * 8;
    CHECK(bops(ct, a) == want);
    CHECK(uniform_bops(ct, 8) == 576 * 64 + i64(9216) * 4 * 8 + 5120 * 64);
}

TEST_CASE("regularizer: zero at an exactly met budget") {
    auto ct = two_layer_table();
    auto bs1 = make_branch_set({8, 4});
    auto bs2 = make_branch_set({8, 4});
    bs1.alphas->data = {5, 0};  // argmax 8
    bs2.alphas->data = {0, 5};  // argmax 4
    RegularizerCfg cfg{real_t(100 * 4 * 8 + 200 * 4 * 4), 1};
    Graph g;
    auto r = regularizer(g, ct, {&bs1, &bs2}, cfg);
    CHECK(r->data[0] == 0);
}

TEST_CASE("regularizer: single-layer hand value") {
    CostTable ct;
    ct.weight_bits = 4;
    ct.layers.push_back({"only", 100, true, 0, 0});
    auto bs = make_branch_set({8, 4});
    bs.alphas->data = {1, 0};
    RegularizerCfg cfg{1600, 1};
    Graph g;
    auto r = regularizer(g, ct, {&bs}, cfg);
    CHECK(r->data[0] == 1600);  // |3200 - 1600|
}

TEST_CASE("regularizer: forward equals |bops(argmax) - t| for random alphas") {
    std::mt19937_64 rng(51);
    const auto ct = count_ops(hand_spec(), 4, 8);
    auto bs = make_branch_set({8, 4, 3});
    RegularizerCfg cfg{real_t(250000), 1};
    for (int trial = 0; trial < 100; ++trial) {
        bs.alphas->data = testutil::random_vec(3, rng, 2);
        Graph g;
        auto r = regularizer(g, ct, {&bs}, cfg);
        BitAssignment a;
        a.entries.push_back(finalize(bs, "dw"));
        const real_t want =
            std::abs(static_cast<real_t>(bops(ct, a)) - cfg.t_bops);
        CHECK(r->data[0] == want);
    }
}

TEST_CASE("regularizer: invariant to per-layer alpha shifts") {
    std::mt19937_64 rng(52);
    const auto ct = count_ops(hand_spec(), 4, 8);
    auto bs = make_branch_set({8, 4, 3});
    bs.alphas->data = testutil::random_vec(3, rng);
    RegularizerCfg cfg{real_t(300000), 1};
    Graph g;
    const real_t before = regularizer(g, ct, {&bs}, cfg)->data[0];
    for (auto& v : bs.alphas->data) v += real_t(2.5);
    const real_t after = regularizer(g, ct, {&bs}, cfg)->data[0];
    CHECK(before == after);
}

TEST_CASE("regularizer: over budget, a cheaper branch's alpha gradient is "
          "negative and matches FD of the softened surrogate") {
    CostTable ct;
    ct.weight_bits = 4;
    ct.layers.push_back({"only", 100, true, 0, 0});
    auto bs = make_branch_set({8, 4, 3});
    bs.alphas->data = {real_t(0.8), real_t(0.1), real_t(-0.2)};  // argmax: 8
    RegularizerCfg cfg{1300, 1};  // 3200 > 1300: over budget
    {
        Graph g;
        auto r = regularizer(g, ct, {&bs}, cfg);
        CHECK(r->data[0] == 3200 - 1300);
        g.backward(r);
    }
    CHECK(bs.alphas->grad[1] < 0);  // 4-bit branch: cheaper
    CHECK(bs.alphas->grad[2] < 0);  // 3-bit branch: cheaper
    CHECK(bs.alphas->grad[0] > 0);

    // FD oracle on the softened surrogate |op * b_w * sum_j p_j b_j - t|.
    auto surrogate = [&] {
        const auto& a = bs.alphas->data;
        real_t mx = std::max({a[0], a[1], a[2]}), denom = 0;
        std::vector<real_t> p(3);
        for (int i = 0; i < 3; ++i) {
            p[i] = std::exp(a[i] - mx);
            denom += p[i];
        }
        real_t soft = 0;
        const real_t bits[3] = {8, 4, 3};
        for (int i = 0; i < 3; ++i) soft += p[i] / denom * bits[i];
        return std::abs(100 * 4 * soft - cfg.t_bops);
    };
    const auto fd = testutil::fd_grad(bs.alphas, surrogate);
    CHECK(testutil::max_rel_err(bs.alphas->grad, fd, real_t(0.01)) < 1e-4);
}

TEST_CASE("expected_bops: uniform alphas average the candidate costs") {
    CostTable ct;
    ct.weight_bits = 4;
    ct.layers.push_back({"first", 10, false, 8, 8});
    ct.layers.push_back({"only", 100, true, 0, 0});
    auto bs = make_branch_set({8, 4});
    const real_t want = 10 * 64 + 100 * 4 * real_t(6);  // mean bits = 6
    CHECK(expected_bops(ct, {&bs}) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("cost report JSON is well-formed and consistent") {
    const auto ct = count_ops(hand_spec(), 4, 8);
    BitAssignment a;
    a.entries.push_back({"dw", 4, 0, {}});
    const auto j = nlohmann::json::parse(cost_report_json(ct, a));
    CHECK(j["layers"].size() == 3);
    i64 sum = 0;
    for (const auto& l : j["layers"]) sum += l["bops"].get<i64>();
    CHECK(sum == j["total_bops"].get<i64>());
    CHECK(j["total_bops"].get<i64>() == bops(ct, a));
}
