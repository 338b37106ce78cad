#pragma once

#include <string>
#include <vector>

#include "bitmix/mixsearch.hpp"
#include "bitmix/zoo.hpp"

namespace bitmix {

struct LayerCost {
    std::string name;
    i64 ops = 0;  // MACs per sample
    bool searched = false;
    int fixed_act_bits = 0;     // non-searched quantized layers
    int fixed_weight_bits = 0;
};

// MAC counts for every quantized conv/linear layer, in model order.
// op = out_elements * kernel_volume * in_channels/groups.
struct CostTable {
    std::vector<LayerCost> layers;
    int weight_bits = 4;  // b_w shared by all searched layers

    i64 fixed_bops() const;  // sum over non-searched quantized layers
    std::vector<const LayerCost*> searched() const;
};

struct RegularizerCfg {
    real_t t_bops = 0;
    real_t lambda_r = 1;

    void validate() const {
        check(t_bops > 0, "regularizer: t_bops must be positive");
        check(lambda_r >= 0, "regularizer: lambda_r must be non-negative");
    }
};

CostTable count_ops(const ModelSpec& spec, int weight_bits = 4,
                    int fixed_bits = 8);

// Exact integer bit-operations of a concrete assignment.
i64 bops(const CostTable& ct, const BitAssignment& assignment);

// Every searched layer at the same activation bit-width.
i64 uniform_bops(const CostTable& ct, int bits);

// |sum_i op_i * b_w * sum_j hs(alpha_i)_j * b_j - t_bops| as a differentiable
// scalar. The forward value equals |bops(argmax assignment) - t_bops|;
// gradients reach every alpha through the softmax backward of hs. branch_sets
// must align with ct.searched() order.
TensorPtr regularizer(Graph& g, const CostTable& ct,
                      const std::vector<BranchSet*>& branch_sets,
                      const RegularizerCfg& cfg);

// Softmax-weighted (soft) cost; the monitoring analog of the regularizer.
real_t expected_bops(const CostTable& ct,
                     const std::vector<BranchSet*>& branch_sets);

std::string cost_report_json(const CostTable& ct,
                             const BitAssignment& assignment);

}  // namespace bitmix
