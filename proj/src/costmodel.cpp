#include <cmath>

#include <nlohmann/json.hpp>

#include "bitmix/costmodel.hpp"

namespace bitmix {

i64 CostTable::fixed_bops() const {
    i64 total = 0;
    for (const auto& l : layers)
        if (!l.searched)
            total += l.ops * l.fixed_act_bits * l.fixed_weight_bits;
    return total;
}

std::vector<const LayerCost*> CostTable::searched() const {
    std::vector<const LayerCost*> out;
    for (const auto& l : layers)
        if (l.searched) out.push_back(&l);
    return out;
}

CostTable count_ops(const ModelSpec& spec, int weight_bits, int fixed_bits) {
    spec.validate();
    CostTable ct;
    ct.weight_bits = weight_bits;
    // Resolve spatial dims along the layer graph.
    std::vector<std::pair<i64, i64>> hw(spec.layers.size(), {0, 0});
    auto input_hw = [&](const LayerSpec& l, size_t i) -> std::pair<i64, i64> {
        if (l.in0 >= 0) return hw[l.in0];
        return i == 0 ? std::pair<i64, i64>{spec.input_h, spec.input_w}
                      : hw[i - 1];
    };
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv: {
                auto [h, w] = input_hw(l, i);
                check(h > 0 && w > 0, "count_ops: unresolved input shape for "
                                      "layer '" + l.name + "'");
                const i64 ho = (h + 2 * l.pad - l.k) / l.stride + 1;
                const i64 wo = (w + 2 * l.pad - l.k) / l.stride + 1;
                check(ho >= 1 && wo >= 1,
                      "count_ops: layer '" + l.name + "' collapses spatially");
                hw[i] = {ho, wo};
                if (!l.quantizable()) break;
                LayerCost c;
                c.name = l.name;
                c.ops = i64(l.out_ch) * ho * wo * i64(l.k) * l.k *
                        (l.in_ch / l.groups);
                c.searched = l.quant == QuantRole::Searched;
                if (!c.searched) {
                    c.fixed_act_bits = fixed_bits;
                    c.fixed_weight_bits = fixed_bits;
                }
                ct.layers.push_back(std::move(c));
                break;
            }
            case LayerKind::Linear: {
                if (!l.quantizable()) break;
                LayerCost c;
                c.name = l.name;
                c.ops = i64(l.out_ch) * l.in_ch;
                c.searched = l.quant == QuantRole::Searched;
                if (!c.searched) {
                    c.fixed_act_bits = fixed_bits;
                    c.fixed_weight_bits = fixed_bits;
                }
                ct.layers.push_back(std::move(c));
                break;
            }
            case LayerKind::Add:
            case LayerKind::GlobalAvgPool:
                hw[i] = input_hw(l, i);
                if (l.kind == LayerKind::GlobalAvgPool) hw[i] = {1, 1};
                break;
        }
    }
    return ct;
}

i64 bops(const CostTable& ct, const BitAssignment& assignment) {
    i64 total = 0;
    for (const auto& l : ct.layers) {
        if (!l.searched) {
            total += l.ops * l.fixed_act_bits * l.fixed_weight_bits;
            continue;
        }
        const auto& e = assignment.require(l.name);
        const int wb = e.weight_bits > 0 ? e.weight_bits : ct.weight_bits;
        total += l.ops * wb * e.bits;
    }
    return total;
}

i64 uniform_bops(const CostTable& ct, int bits) {
    i64 total = ct.fixed_bops();
    for (const auto* l : ct.searched())
        total += l->ops * ct.weight_bits * bits;
    return total;
}

TensorPtr regularizer(Graph& g, const CostTable& ct,
                      const std::vector<BranchSet*>& branch_sets,
                      const RegularizerCfg& cfg) {
    cfg.validate();
    const auto searched = ct.searched();
    check(searched.size() == branch_sets.size(),
          "regularizer: every searched layer needs a branch set");
    TensorPtr total;
    for (size_t i = 0; i < searched.size(); ++i) {
        BranchSet& bs = *branch_sets[i];
        std::vector<real_t> coef(bs.size());
        for (int j = 0; j < bs.size(); ++j) {
            const int wb = bs.pair_mode() ? bs.weight_bits[j] : ct.weight_bits;
            coef[j] = static_cast<real_t>(searched[i]->ops) * wb *
                      bs.act_bits[j];
        }
        auto h = hard_softmax(g, bs.alphas);
        auto term = ops::dot_const(g, h, std::move(coef));
        total = total ? ops::add(g, total, term) : term;
    }
    check(total != nullptr, "regularizer: no searched layers");
    const real_t offset = static_cast<real_t>(ct.fixed_bops()) - cfg.t_bops;
    return ops::abs_scalar(g, ops::add_const(g, total, offset));
}

real_t expected_bops(const CostTable& ct,
                     const std::vector<BranchSet*>& branch_sets) {
    const auto searched = ct.searched();
    check(searched.size() == branch_sets.size(),
          "expected_bops: branch set count mismatch");
    real_t total = static_cast<real_t>(ct.fixed_bops());
    for (size_t i = 0; i < searched.size(); ++i) {
        const BranchSet& bs = *branch_sets[i];
        const auto& a = bs.alphas->data;
        const real_t mx = *std::max_element(a.begin(), a.end());
        real_t denom = 0;
        std::vector<real_t> p(a.size());
        for (size_t j = 0; j < a.size(); ++j) {
            p[j] = std::exp(a[j] - mx);
            denom += p[j];
        }
        real_t soft_bits = 0;
        for (size_t j = 0; j < a.size(); ++j) {
            const int wb =
                bs.pair_mode() ? bs.weight_bits[j] : ct.weight_bits;
            soft_bits += p[j] / denom * wb * bs.act_bits[j];
        }
        total += static_cast<real_t>(searched[i]->ops) * soft_bits;
    }
    return total;
}

std::string cost_report_json(const CostTable& ct,
                             const BitAssignment& assignment) {
    nlohmann::json layers = nlohmann::json::array();
    i64 total_ops = 0;
    const i64 total_bops = bops(ct, assignment);
    for (const auto& l : ct.layers) {
        int act_bits = l.fixed_act_bits;
        int wb = l.fixed_weight_bits;
        if (l.searched) {
            const auto& e = assignment.require(l.name);
            act_bits = e.bits;
            wb = e.weight_bits > 0 ? e.weight_bits : ct.weight_bits;
        }
        layers.push_back({{"name", l.name},
                          {"op", l.ops},
                          {"bits", act_bits},
                          {"weight_bits", wb},
                          {"searched", l.searched},
                          {"bops", l.ops * act_bits * wb}});
        total_ops += l.ops;
    }
    nlohmann::json j{{"layers", std::move(layers)},
                     {"total_ops", total_ops},
                     {"total_bops", total_bops},
                     {"weight_bits", ct.weight_bits}};
    return j.dump(2);
}

}  // namespace bitmix
