#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "bitmix/kernels.hpp"
#include "bitmix/mixsearch.hpp"

namespace bitmix {

void BranchSet::validate() const {
    const size_t b = act_bits.size();
    check(b >= 1, "branch set: needs at least 1 candidate");
    check(alphas && alphas->numel() == static_cast<i64>(b),
          "branch set: alphas length must equal candidate count");
    check(act_specs.size() == b,
          "branch set: one activation spec per candidate required");
    if (!weight_bits.empty()) {
        check(weight_bits.size() == b && weight_specs.size() == b,
              "branch set: pair mode requires one weight bit and spec per "
              "candidate");
    }
}

BranchSet make_branch_set(const std::vector<int>& act_bits,
                          bool lsq_grad_scale) {
    BranchSet bs;
    bs.act_bits = act_bits;
    bs.alphas = make_tensor({static_cast<i64>(act_bits.size())}, true);
    for (int b : act_bits)
        bs.act_specs.push_back(
            make_quant_spec(b, false, 1, true, lsq_grad_scale));
    bs.validate();
    return bs;
}

BranchSet make_branch_set_pairs(const std::vector<std::pair<int, int>>& pairs,
                                bool lsq_grad_scale) {
    BranchSet bs;
    for (auto [a, w] : pairs) {
        bs.act_bits.push_back(a);
        bs.weight_bits.push_back(w);
        bs.act_specs.push_back(make_quant_spec(a, false, 1, true,
                                               lsq_grad_scale));
        bs.weight_specs.push_back(make_quant_spec(w, true, 1, true,
                                                  lsq_grad_scale));
    }
    bs.alphas = make_tensor({static_cast<i64>(pairs.size())}, true);
    bs.validate();
    return bs;
}

TensorPtr mix_forward(Graph& g, const TensorPtr& x, BranchSet& bs) {
    bs.validate();
    check(bs.size() >= 1 && !bs.act_specs.empty(),
          "mix_forward: empty branch set");
    for (const auto& s : bs.act_specs)
        check(s.step_value() > 0, "mix_forward: branch steps must be positive");
    auto p = ops::softmax(g, bs.alphas);
    std::vector<TensorPtr> branches;
    branches.reserve(bs.act_specs.size());
    for (auto& spec : bs.act_specs) branches.push_back(quantize(g, x, spec));
    return ops::weighted_sum(g, branches, p);
}

TensorPtr meta_forward(Graph& g, const TensorPtr& x, BranchSet& bs,
                       int branch) {
    check(branch >= 0 && branch < bs.size(),
          "meta_forward: branch index " + std::to_string(branch) +
              " out of range [0," + std::to_string(bs.size()) + ")");
    return quantize(g, x, bs.act_specs[branch]);
}

TensorPtr mix_forward_weights(Graph& g, const TensorPtr& w, BranchSet& bs) {
    check(bs.pair_mode(), "mix_forward_weights: branch set is not in pair mode");
    auto p = ops::softmax(g, bs.alphas);
    std::vector<TensorPtr> branches;
    branches.reserve(bs.weight_specs.size());
    for (auto& spec : bs.weight_specs)
        branches.push_back(quantize_weights(g, w, spec));
    return ops::weighted_sum(g, branches, p);
}

TensorPtr meta_forward_weights(Graph& g, const TensorPtr& w, BranchSet& bs,
                               int branch) {
    check(bs.pair_mode(),
          "meta_forward_weights: branch set is not in pair mode");
    check(branch >= 0 && branch < bs.size(),
          "meta_forward_weights: branch index out of range");
    return quantize_weights(g, w, bs.weight_specs[branch]);
}

int argmax_index(std::span<const real_t> values) {
    check(!values.empty(), "argmax: empty input");
    int best = 0;
    for (int i = 1; i < static_cast<int>(values.size()); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

TensorPtr hard_softmax(Graph& g, const TensorPtr& alphas) {
    check(alphas->shape.size() == 1 && alphas->numel() >= 1,
          "hard_softmax: expects a non-empty 1-D tensor");
    auto out = make_tensor(alphas->shape);
    out->data[argmax_index(alphas->data)] = 1;
    if (g.recording() && alphas->requires_grad) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({alphas}, out, [alphas, out](Graph& g) {
            const auto& go = g.cot(out);
            const size_t n = go.size();
            // p = softmax(alphas); gx = p .* (go - <p, go>)
            std::vector<real_t> p(n);
            const real_t mx =
                *std::max_element(alphas->data.begin(), alphas->data.end());
            real_t denom = 0;
            for (size_t i = 0; i < n; ++i) {
                p[i] = std::exp(alphas->data[i] - mx);
                denom += p[i];
            }
            real_t dot = 0;
            for (size_t i = 0; i < n; ++i) {
                p[i] /= denom;
                dot += p[i] * go[i];
            }
            auto& gx = g.cot(alphas);
            for (size_t i = 0; i < n; ++i) gx[i] += p[i] * (go[i] - dot);
        });
    }
    return out;
}

int finalize_index(const BranchSet& bs) {
    return argmax_index(bs.alphas->data);
}

AssignmentEntry finalize(const BranchSet& bs, const std::string& layer_name) {
    AssignmentEntry e;
    e.layer_name = layer_name;
    const int idx = finalize_index(bs);
    e.bits = bs.act_bits[idx];
    e.weight_bits = bs.pair_mode() ? bs.weight_bits[idx] : 0;
    const size_t n = bs.alphas->data.size();
    e.alpha_softmax.resize(n);
    const real_t mx =
        *std::max_element(bs.alphas->data.begin(), bs.alphas->data.end());
    real_t denom = 0;
    for (size_t i = 0; i < n; ++i) {
        e.alpha_softmax[i] = std::exp(bs.alphas->data[i] - mx);
        denom += e.alpha_softmax[i];
    }
    for (auto& v : e.alpha_softmax) v /= denom;
    return e;
}

const AssignmentEntry* BitAssignment::find(const std::string& layer) const {
    for (const auto& e : entries)
        if (e.layer_name == layer) return &e;
    return nullptr;
}

const AssignmentEntry& BitAssignment::require(const std::string& layer) const {
    const auto* e = find(layer);
    if (!e) fail("bit assignment: missing entry for layer '" + layer + "'");
    return *e;
}

std::string BitAssignment::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries) {
        nlohmann::json j{{"layer_name", e.layer_name},
                         {"bits", e.bits},
                         {"alpha_softmax", e.alpha_softmax}};
        if (e.weight_bits > 0) j["weight_bits"] = e.weight_bits;
        arr.push_back(std::move(j));
    }
    return nlohmann::json{{"assignment", std::move(arr)}}.dump(2);
}

BitAssignment BitAssignment::from_json(const std::string& text) {
    BitAssignment a;
    const auto j = nlohmann::json::parse(text);
    check(j.contains("assignment") && j["assignment"].is_array(),
          "bit assignment: malformed JSON, expected an 'assignment' array");
    for (const auto& item : j["assignment"]) {
        AssignmentEntry e;
        e.layer_name = item.at("layer_name").get<std::string>();
        e.bits = item.at("bits").get<int>();
        e.weight_bits = item.value("weight_bits", 0);
        if (item.contains("alpha_softmax"))
            e.alpha_softmax =
                item["alpha_softmax"].get<std::vector<real_t>>();
        a.entries.push_back(std::move(e));
    }
    return a;
}

}  // namespace bitmix
