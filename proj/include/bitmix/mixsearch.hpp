#pragma once

#include <string>
#include <vector>

#include "bitmix/quant.hpp"
#include "bitmix/tensor.hpp"

namespace bitmix {

// Per-layer candidate bit-widths with one architectural score and one
// trainable step size per branch. Weights are shared across branches; only
// the quantizers are duplicated. In pair mode each candidate also carries a
// weight bit-width and a per-branch signed weight quantizer over the shared
// full-precision weight.
struct BranchSet {
    std::vector<int> act_bits;
    std::vector<int> weight_bits;  // empty unless pair mode
    TensorPtr alphas;              // length B
    std::vector<QuantSpec> act_specs;
    std::vector<QuantSpec> weight_specs;  // pair mode only

    int size() const { return static_cast<int>(act_bits.size()); }
    bool pair_mode() const { return !weight_bits.empty(); }
    void validate() const;
};

BranchSet make_branch_set(const std::vector<int>& act_bits,
                          bool lsq_grad_scale = true);
BranchSet make_branch_set_pairs(const std::vector<std::pair<int, int>>& pairs,
                                bool lsq_grad_scale = true);

// Eq-style softmax mixing: sum_i softmax(alpha)_i * q_i(x, b_i).
TensorPtr mix_forward(Graph& g, const TensorPtr& x, BranchSet& bs);

// Single-branch forwarding; alphas are not touched and receive no gradient.
TensorPtr meta_forward(Graph& g, const TensorPtr& x, BranchSet& bs, int branch);

// Pair-mode weight paths over the shared full-precision weight.
TensorPtr mix_forward_weights(Graph& g, const TensorPtr& w, BranchSet& bs);
TensorPtr meta_forward_weights(Graph& g, const TensorPtr& w, BranchSet& bs,
                               int branch);

// Forward: exact one-hot at the argmax (ties -> lowest index).
// Backward: the softmax Jacobian-vector product.
TensorPtr hard_softmax(Graph& g, const TensorPtr& alphas);

// Argmax with ties resolved to the lowest index. With candidates ordered
// descending this keeps the higher bit-width.
int argmax_index(std::span<const real_t> values);
int finalize_index(const BranchSet& bs);

struct AssignmentEntry {
    std::string layer_name;
    int bits = 0;
    int weight_bits = 0;  // 0 outside pair mode
    std::vector<real_t> alpha_softmax;
};

struct BitAssignment {
    std::vector<AssignmentEntry> entries;

    const AssignmentEntry* find(const std::string& layer) const;
    const AssignmentEntry& require(const std::string& layer) const;

    std::string to_json() const;
    static BitAssignment from_json(const std::string& text);
};

// Snapshot of one finalized branch set.
AssignmentEntry finalize(const BranchSet& bs, const std::string& layer_name);

}  // namespace bitmix
