#include <algorithm>
#include <cmath>

#include "bitmix/model.hpp"

namespace bitmix {

Model Model::build(const ModelSpec& spec, const QuantSetup& setup,
                   std::mt19937_64& rng) {
    spec.validate();
    if (setup.pair_mode)
        check(!setup.pair_candidates.empty(),
              "model: pair mode needs pair candidates");
    Model m;
    m.spec = spec;
    m.setup = setup;
    m.params.resize(spec.layers.size());
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        auto& p = m.params[i];
        if (l.kind == LayerKind::Conv) {
            const i64 fan_in = i64(l.in_ch / l.groups) * l.k * l.k;
            p.weight = randn({l.out_ch, l.in_ch / l.groups, l.k, l.k}, rng,
                             std::sqrt(real_t(2) / fan_in), true);
        } else if (l.kind == LayerKind::Linear) {
            p.weight = randn({l.out_ch, l.in_ch}, rng,
                             std::sqrt(real_t(2) / l.in_ch), true);
            p.bias = make_tensor({l.out_ch}, true);
        }
        if (l.bn) {
            p.bn_gamma = full({l.out_ch}, 1, true);
            p.bn_beta = make_tensor({l.out_ch}, true);
            p.bn_state.running_mean = make_tensor({l.out_ch});
            p.bn_state.running_var = full({l.out_ch}, 1);
        }
        if (l.quant == QuantRole::FixedFirst || l.quant == QuantRole::FixedLast) {
            p.fixed_act = make_quant_spec(setup.fixed_bits, false, 1, true,
                                          setup.lsq_grad_scale);
            p.weight_q = make_quant_spec(setup.fixed_bits, true, 1, true,
                                         setup.lsq_grad_scale);
        } else if (l.quant == QuantRole::Searched) {
            p.weight_q = make_quant_spec(setup.weight_bits, true, 1, true,
                                         setup.lsq_grad_scale);
            p.search_slot = static_cast<int>(m.branches.size());
            m.branches.push_back(
                setup.pair_mode
                    ? make_branch_set_pairs(setup.pair_candidates,
                                            setup.lsq_grad_scale)
                    : make_branch_set(setup.candidates, setup.lsq_grad_scale));
            m.searched.push_back(static_cast<int>(i));
        }
    }
    return m;
}

namespace {

TensorPtr quantize_input(Graph& g, Model& m, const LayerSpec& l,
                         LayerParams& p, const TensorPtr& xin,
                         const ForwardCfg& cfg) {
    if (l.quant == QuantRole::None) return xin;
    if (cfg.observe_prequant) cfg.observe_prequant(l, xin);
    if (cfg.aq == ActQuant::None) return xin;
    if (l.quant != QuantRole::Searched) return quantize(g, xin, p.fixed_act);
    auto& bs = m.branches[p.search_slot];
    switch (cfg.aq) {
        case ActQuant::Meta:
            return meta_forward(g, xin, bs, cfg.meta_branch);
        case ActQuant::Mix:
            return mix_forward(g, xin, bs);
        case ActQuant::Fixed: {
            check(cfg.assignment != nullptr,
                  "forward: Fixed quantization needs a bit assignment");
            const auto& e = cfg.assignment->require(l.name);
            const int idx = m.branch_index(p.search_slot, e);
            return quantize(g, xin, bs.act_specs[idx]);
        }
        default:
            return xin;
    }
}

TensorPtr quantize_layer_weight(Graph& g, Model& m, const LayerSpec& l,
                                LayerParams& p, const ForwardCfg& cfg) {
    const bool searched = l.quant == QuantRole::Searched;
    if (searched && m.setup.pair_mode && cfg.aq != ActQuant::None) {
        auto& bs = m.branches[p.search_slot];
        if (cfg.aq == ActQuant::Meta)
            return meta_forward_weights(g, p.weight, bs, cfg.meta_branch);
        if (cfg.aq == ActQuant::Mix)
            return mix_forward_weights(g, p.weight, bs);
        // Fixed: the assigned pair's weight quantizer.
        const auto& e = cfg.assignment->require(l.name);
        const int idx = m.branch_index(p.search_slot, e);
        return quantize_weights(g, p.weight, bs.weight_specs[idx]);
    }
    if (cfg.quant_weights && l.quant != QuantRole::None)
        return quantize_weights(g, p.weight, p.weight_q);
    return p.weight;
}

TensorPtr apply_act(Graph& g, Act act, const TensorPtr& x) {
    switch (act) {
        case Act::ReLU: return ops::relu(g, x);
        case Act::ReLU6: return ops::relu6(g, x);
        default: return x;
    }
}

}  // namespace

TensorPtr Model::forward(Graph& g, const TensorPtr& x, const ForwardCfg& cfg) {
    check(x->shape.size() == 4 && x->shape[1] == spec.input_ch,
          "forward: input must be [N," + std::to_string(spec.input_ch) +
              ",H,W], got " + shape_str(x->shape));
    std::vector<TensorPtr> outs(spec.layers.size());
    auto input_of = [&](int idx, int layer_i) -> const TensorPtr& {
        if (idx >= 0) return outs[idx];
        return layer_i == 0 ? x : outs[layer_i - 1];
    };
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        auto& p = params[i];
        const TensorPtr& a = input_of(l.in0, static_cast<int>(i));
        switch (l.kind) {
            case LayerKind::Conv: {
                auto xin = quantize_input(g, *this, l, p, a, cfg);
                auto w = quantize_layer_weight(g, *this, l, p, cfg);
                auto y = ops::conv2d(g, xin, w, l.stride, l.pad, l.groups);
                if (l.bn)
                    y = ops::batch_norm(g, y, p.bn_gamma, p.bn_beta,
                                        p.bn_state, bn_momentum, bn_eps,
                                        cfg.training);
                outs[i] = apply_act(g, l.act, y);
                break;
            }
            case LayerKind::Linear: {
                auto xin = quantize_input(g, *this, l, p, a, cfg);
                auto w = quantize_layer_weight(g, *this, l, p, cfg);
                outs[i] = ops::linear(g, xin, w, p.bias);
                break;
            }
            case LayerKind::Add:
                outs[i] = ops::add(g, a, input_of(l.in1, static_cast<int>(i)));
                break;
            case LayerKind::GlobalAvgPool:
                outs[i] = ops::global_avg_pool(g, a);
                break;
        }
    }
    return outs.back();
}

std::vector<TensorPtr> Model::weights() const {
    std::vector<TensorPtr> out;
    for (const auto& p : params) {
        if (p.weight) out.push_back(p.weight);
        if (p.bias) out.push_back(p.bias);
        if (p.bn_gamma) out.push_back(p.bn_gamma);
        if (p.bn_beta) out.push_back(p.bn_beta);
    }
    return out;
}

std::vector<TensorPtr> Model::act_steps() const {
    std::vector<TensorPtr> out;
    for (const auto& p : params)
        if (p.fixed_act.step) out.push_back(p.fixed_act.step);
    for (const auto& bs : branches)
        for (const auto& s : bs.act_specs) out.push_back(s.step);
    return out;
}

std::vector<TensorPtr> Model::weight_steps() const {
    std::vector<TensorPtr> out;
    for (const auto& p : params)
        if (p.weight_q.step) out.push_back(p.weight_q.step);
    for (const auto& bs : branches)
        for (const auto& s : bs.weight_specs) out.push_back(s.step);
    return out;
}

std::vector<TensorPtr> Model::alphas() const {
    std::vector<TensorPtr> out;
    out.reserve(branches.size());
    for (const auto& bs : branches) out.push_back(bs.alphas);
    return out;
}

std::vector<std::pair<std::string, TensorPtr>> Model::named_parameters()
    const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& l = spec.layers[i];
        const auto& p = params[i];
        auto push = [&](const std::string& suffix, const TensorPtr& t) {
            if (t) out.emplace_back(l.name + "." + suffix, t);
        };
        push("weight", p.weight);
        push("bias", p.bias);
        push("bn.gamma", p.bn_gamma);
        push("bn.beta", p.bn_beta);
        push("bn.running_mean", p.bn_state.running_mean);
        push("bn.running_var", p.bn_state.running_var);
        push("actq.step", p.fixed_act.step);
        push("wq.step", p.weight_q.step);
        if (p.search_slot >= 0) {
            const auto& bs = branches[p.search_slot];
            push("alpha", bs.alphas);
            for (int k = 0; k < bs.size(); ++k) {
                std::string tag = "b" + std::to_string(bs.act_bits[k]);
                if (bs.pair_mode())
                    tag += "w" + std::to_string(bs.weight_bits[k]);
                push("branch." + tag + ".step", bs.act_specs[k].step);
                if (bs.pair_mode())
                    push("branch." + tag + ".wstep", bs.weight_specs[k].step);
            }
        }
    }
    return out;
}

int Model::branch_slot(const std::string& layer_name) const {
    const int li = layer_index(layer_name);
    const int slot = params[li].search_slot;
    check(slot >= 0, "model: layer '" + layer_name + "' is not searched");
    return slot;
}

BranchSet& Model::branch_for(const std::string& layer_name) {
    return branches[branch_slot(layer_name)];
}

int Model::branch_index(int slot, const AssignmentEntry& e) const {
    const auto& bs = branches[slot];
    for (int i = 0; i < bs.size(); ++i) {
        if (bs.act_bits[i] != e.bits) continue;
        if (bs.pair_mode() && bs.weight_bits[i] != e.weight_bits) continue;
        return i;
    }
    failf("model: assignment bits ", e.bits, " not among candidates of layer '",
          e.layer_name, "'");
}

BitAssignment Model::finalize_assignment() const {
    BitAssignment a;
    for (size_t slot = 0; slot < branches.size(); ++slot)
        a.entries.push_back(
            finalize(branches[slot], spec.layers[searched[slot]].name));
    return a;
}

void Model::clamp_steps(real_t floor) {
    for (auto& p : params) {
        clamp_step(p.fixed_act, floor);
        clamp_step(p.weight_q, floor);
    }
    for (auto& bs : branches) {
        for (auto& s : bs.act_specs) clamp_step(s, floor);
        for (auto& s : bs.weight_specs) clamp_step(s, floor);
    }
}

int Model::layer_index(const std::string& name) const {
    for (size_t i = 0; i < spec.layers.size(); ++i)
        if (spec.layers[i].name == name) return static_cast<int>(i);
    fail("model: no layer named '" + name + "'");
}

const LayerSpec& Model::layer(const std::string& name) const {
    return spec.layers[layer_index(name)];
}

void set_requires_grad(const std::vector<TensorPtr>& ts, bool value) {
    for (const auto& t : ts) t->requires_grad = value;
}

}  // namespace bitmix
