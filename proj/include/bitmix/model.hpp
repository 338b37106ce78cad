#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bitmix/mixsearch.hpp"
#include "bitmix/tensor.hpp"
#include "bitmix/zoo.hpp"

namespace bitmix {

// Quantizer wiring choices shared by a whole model.
struct QuantSetup {
    std::vector<int> candidates{8, 4, 3};
    int weight_bits = 4;
    int fixed_bits = 8;  // first/last layers, activations and weights
    bool lsq_grad_scale = true;
    bool pair_mode = false;
    std::vector<std::pair<int, int>> pair_candidates;  // pair mode only
};

// How searched activation quantizers behave in one forward pass.
enum class ActQuant { None, Fixed, Meta, Mix };

struct ForwardCfg {
    ActQuant aq = ActQuant::None;
    int meta_branch = 0;
    const BitAssignment* assignment = nullptr;  // required for Fixed
    bool quant_weights = false;
    bool training = false;
    // Called with the tensor feeding each quantizable layer's quantizer.
    std::function<void(const LayerSpec&, const TensorPtr&)> observe_prequant;
};

struct LayerParams {
    TensorPtr weight;  // conv OIHW / linear [out,in]
    TensorPtr bias;    // linear only
    TensorPtr bn_gamma, bn_beta;
    ops::BNState bn_state;
    QuantSpec fixed_act;   // FixedFirst / FixedLast
    QuantSpec weight_q;    // signed, weight_bits (fixed_bits on first/last)
    int search_slot = -1;  // index into Model::branches when Searched
};

class Model {
  public:
    ModelSpec spec;
    QuantSetup setup;
    std::vector<LayerParams> params;
    std::vector<BranchSet> branches;      // one per searched layer
    std::vector<int> searched;            // layer index per branch slot
    real_t bn_momentum = real_t(0.1);
    real_t bn_eps = real_t(1e-5);

    static Model build(const ModelSpec& spec, const QuantSetup& setup,
                       std::mt19937_64& rng);

    TensorPtr forward(Graph& g, const TensorPtr& x, const ForwardCfg& cfg);

    // Parameter groups (Table-style freezing is done over these).
    std::vector<TensorPtr> weights() const;       // conv/linear/bn affine
    std::vector<TensorPtr> act_steps() const;     // fixed + branch steps
    std::vector<TensorPtr> weight_steps() const;  // per-layer (+ pair branches)
    std::vector<TensorPtr> alphas() const;

    std::vector<std::pair<std::string, TensorPtr>> named_parameters() const;

    BranchSet& branch_for(const std::string& layer_name);
    int branch_slot(const std::string& layer_name) const;
    int branch_index(int slot, const AssignmentEntry& e) const;

    BitAssignment finalize_assignment() const;
    void clamp_steps(real_t floor = real_t(1e-8));

    const LayerSpec& layer(const std::string& name) const;
    int layer_index(const std::string& name) const;
};

void set_requires_grad(const std::vector<TensorPtr>& ts, bool value);

}  // namespace bitmix
