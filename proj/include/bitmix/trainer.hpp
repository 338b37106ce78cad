#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "bitmix/costmodel.hpp"
#include "bitmix/data.hpp"
#include "bitmix/model.hpp"

namespace bitmix {

struct ParamGroup {
    std::vector<TensorPtr> params;
    real_t lr = real_t(0.01);
    real_t momentum = real_t(0.9);
    real_t weight_decay = 0;
    real_t grad_clip = 0;  // group gradient-norm cap; 0 = off
};

using VelocityStore = std::unordered_map<Tensor*, std::vector<real_t>>;

// SGD with momentum. Parameters whose gradient was never written this step
// (empty grad) are skipped entirely, so branches that were not active in the
// forward pass do not move. An external velocity store lets momentum survive
// optimizer rebuilds (phase switches within the alternating epoch).
class SGD {
  public:
    explicit SGD(std::vector<ParamGroup> groups,
                 VelocityStore* store = nullptr);
    void step();
    void zero_grad();
    void set_lr(size_t group, real_t lr);
    real_t lr(size_t group) const;

  private:
    std::vector<ParamGroup> groups_;
    VelocityStore own_;
    VelocityStore* velocity_;
};

// The full training schedule: which parameter families train or freeze in
// each phase, for how long, and at what rates.
struct PhasePlan {
    int bit_meta_epochs = 1;
    int alternate_epochs = 1;
    int finetune_epochs = 20;
    int meta_iters = 1;    // alternation granularity within the mixed epoch
    int search_iters = 1;
    real_t lr_weights = real_t(0.05);
    real_t lr_steps = real_t(0.01);
    real_t lr_alphas = real_t(0.05);
    real_t momentum = real_t(0.9);
    real_t alpha_momentum = 0;
    real_t alpha_grad_clip = 1;  // keeps huge budget penalties step-bounded
    real_t weight_decay = 0;
    bool cosine_finetune = true;
    i64 batch_size = 64;
    bool augment = false;
    bool prefetch = true;
};

struct TrainState {
    i64 epoch = 0;
    i64 iter = 0;
    std::uint64_t seed = 0;
};

class MetricsWriter {
  public:
    MetricsWriter() = default;
    explicit MetricsWriter(const std::string& path);
    void row(i64 epoch, i64 iter, const std::string& phase, real_t loss,
             real_t reg_value, real_t expected_bops, real_t lr);
    bool enabled() const { return out_.is_open(); }

  private:
    std::ofstream out_;
};

struct FinetuneResult {
    real_t test_accuracy = 0;
    i64 model_bops = 0;
    std::vector<real_t> per_epoch_accuracy;
};

// Drives the two-phase procedure: bit selection (bit-meta epochs, then
// strict bit-meta/bit-search alternation) and fixed-bit weight training.
class Trainer {
  public:
    Trainer(Model& model, const Dataset& train, const Dataset& test,
            PhasePlan plan, std::uint64_t seed);

    void set_cost(const CostTable* ct, RegularizerCfg cfg);
    void set_metrics(MetricsWriter* mw) { metrics_ = mw; }
    void set_alpha_trace(const std::string& path);

    // Initializes activation step sizes from one full-precision forward.
    void calibrate_act_steps();
    // Initializes weight step sizes from the current weights.
    void init_weight_steps();

    void pretrain(int epochs);
    real_t bit_meta_step(const Batch& batch);
    real_t bit_search_step(const Batch& batch);
    BitAssignment run_bit_selection();
    FinetuneResult run_weight_training(const BitAssignment& assignment);

    // One weight-training step at a fixed assignment (instrumentation
    // regimes reuse this with per-epoch assignments).
    real_t fixed_step(const Batch& batch, const BitAssignment& assignment,
                      bool quant_weights);

    real_t accuracy(const Dataset& ds, const ForwardCfg& cfg,
                    i64 batch_size = 256);

    enum class Phase { Pretrain, BitMeta, BitSearch, Finetune };
    void enter_phase(Phase p);

    TrainState& state() { return state_; }
    Model& model() { return model_; }
    const PhasePlan& plan() const { return plan_; }
    const Dataset& train_set() const { return train_; }
    const Dataset& test_set() const { return test_; }

  private:
    real_t pretrain_step(const Batch& batch);
    void log(const std::string& phase, real_t loss, real_t reg, real_t lr);
    void trace_alphas();
    void assert_frozen_before();
    void assert_frozen_after(const char* phase);

    Model& model_;
    const Dataset& train_;
    const Dataset& test_;
    PhasePlan plan_;
    TrainState state_;
    const CostTable* cost_ = nullptr;
    RegularizerCfg reg_cfg_;
    MetricsWriter* metrics_ = nullptr;
    std::ofstream alpha_trace_;
    VelocityStore velocity_;
    std::optional<SGD> opt_;
    Phase phase_ = Phase::Pretrain;
    std::vector<TensorPtr> frozen_;
    std::vector<std::uint64_t> frozen_hash_;
    bool calibrated_ = false;
};

std::uint64_t hash_bytes(const void* data, size_t n);

}  // namespace bitmix
