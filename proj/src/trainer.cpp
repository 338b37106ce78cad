#include <algorithm>
#include <cmath>
#include <numbers>

#include "bitmix/kernels.hpp"
#include "bitmix/trainer.hpp"

namespace bitmix {

namespace {
constexpr real_t kPi = std::numbers::pi_v<real_t>;
}

std::uint64_t hash_bytes(const void* data, size_t n) {
    // FNV-1a
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

SGD::SGD(std::vector<ParamGroup> groups, VelocityStore* store)
    : groups_(std::move(groups)), velocity_(store ? store : &own_) {}

void SGD::step() {
    for (auto& g : groups_) {
        if (g.grad_clip > 0) {
            // Scale the whole group's gradient to the norm cap; relative
            // magnitudes across layers and branches are what steer the
            // search, so they must survive clipping.
            real_t sq = 0;
            for (auto& p : g.params)
                if (!p->grad.empty())
                    sq += kern::ops().dot(p->grad.data(), p->grad.data(),
                                          p->grad.size());
            const real_t norm = std::sqrt(sq);
            if (norm > g.grad_clip) {
                const real_t scale = g.grad_clip / norm;
                for (auto& p : g.params)
                    if (!p->grad.empty())
                        kern::ops().scal(scale, p->grad.data(),
                                         p->grad.size());
            }
        }
        for (auto& p : g.params) {
            if (p->grad.empty()) continue;
            auto& v = (*velocity_)[p.get()];
            if (v.empty()) v.assign(p->data.size(), real_t(0));
            if (g.weight_decay != 0)
                kern::ops().axpy(g.weight_decay, p->data.data(),
                                 p->grad.data(), p->data.size());
            kern::ops().scal(g.momentum, v.data(), v.size());
            kern::ops().axpy(1, p->grad.data(), v.data(), v.size());
            kern::ops().axpy(-g.lr, v.data(), p->data.data(), v.size());
        }
    }
}

void SGD::zero_grad() {
    for (auto& g : groups_)
        for (auto& p : g.params) p->zero_grad();
}

void SGD::set_lr(size_t group, real_t lr) { groups_.at(group).lr = lr; }
real_t SGD::lr(size_t group) const { return groups_.at(group).lr; }

MetricsWriter::MetricsWriter(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    check(out_.good(), "metrics: cannot write '" + path + "'");
    out_ << "epoch,iter,phase,loss,reg_value,expected_bops,lr\n";
}

void MetricsWriter::row(i64 epoch, i64 iter, const std::string& phase,
                        real_t loss, real_t reg_value, real_t expected_bops,
                        real_t lr) {
    if (!out_.is_open()) return;
    out_ << epoch << ',' << iter << ',' << phase << ',' << loss << ','
         << reg_value << ',' << expected_bops << ',' << lr << '\n';
    out_.flush();
}

Trainer::Trainer(Model& model, const Dataset& train, const Dataset& test,
                 PhasePlan plan, std::uint64_t seed)
    : model_(model), train_(train), test_(test), plan_(plan) {
    state_.seed = seed;
}

void Trainer::set_cost(const CostTable* ct, RegularizerCfg cfg) {
    cfg.validate();
    cost_ = ct;
    reg_cfg_ = cfg;
}

void Trainer::set_alpha_trace(const std::string& path) {
    alpha_trace_.open(path, std::ios::trunc);
    check(alpha_trace_.good(), "trainer: cannot write '" + path + "'");
    alpha_trace_ << "iter,layer,branch,bits,alpha,softmax\n";
}

// Phase-dependent trainability per the schedule: bit-meta trains FP weights
// and s_a with alpha frozen; bit-search trains alpha with weights and s_a
// frozen; fine-tuning trains weights, s_a and s_w with bits fixed.
void Trainer::enter_phase(Phase p) {
    phase_ = p;
    const bool w = p == Phase::Pretrain || p == Phase::BitMeta ||
                   p == Phase::Finetune;
    const bool sa = p == Phase::BitMeta || p == Phase::Finetune;
    const bool sw = p == Phase::Finetune;
    const bool al = p == Phase::BitSearch;
    set_requires_grad(model_.weights(), w);
    set_requires_grad(model_.act_steps(), sa);
    set_requires_grad(model_.weight_steps(), sw);
    set_requires_grad(model_.alphas(), al);

    std::vector<ParamGroup> groups;
    if (w)
        groups.push_back({model_.weights(), plan_.lr_weights, plan_.momentum,
                          plan_.weight_decay});
    if (sa)
        groups.push_back(
            {model_.act_steps(), plan_.lr_steps, plan_.momentum, 0});
    if (sw)
        groups.push_back(
            {model_.weight_steps(), plan_.lr_steps, plan_.momentum, 0});
    if (al)
        groups.push_back({model_.alphas(), plan_.lr_alphas,
                          plan_.alpha_momentum, 0, plan_.alpha_grad_clip});
    opt_.emplace(std::move(groups), &velocity_);

    frozen_.clear();
    auto freeze_unless = [&](const std::vector<TensorPtr>& ts, bool trained) {
        if (trained) return;
        frozen_.insert(frozen_.end(), ts.begin(), ts.end());
    };
    freeze_unless(model_.weights(), w);
    freeze_unless(model_.act_steps(), sa);
    freeze_unless(model_.weight_steps(), sw);
    freeze_unless(model_.alphas(), al);
}

void Trainer::assert_frozen_before() {
    frozen_hash_.resize(frozen_.size());
    for (size_t i = 0; i < frozen_.size(); ++i)
        frozen_hash_[i] = hash_bytes(frozen_[i]->data.data(),
                                     frozen_[i]->data.size() * sizeof(real_t));
}

void Trainer::assert_frozen_after(const char* phase) {
    for (size_t i = 0; i < frozen_.size(); ++i) {
        const auto h = hash_bytes(frozen_[i]->data.data(),
                                  frozen_[i]->data.size() * sizeof(real_t));
        if (h != frozen_hash_[i])
            failf("trainer: frozen parameter moved during a ", phase,
                  " step (index ", i, ")");
    }
}

void Trainer::calibrate_act_steps() {
    // Sample the tensor feeding each quantizer from one FP forward.
    BatchIterator it(train_, {plan_.batch_size, /*shuffle=*/false, false},
                     state_.seed, 0);
    auto batch = it.next();
    check(batch.has_value(), "trainer: empty training set");
    std::unordered_map<std::string, std::vector<real_t>> samples;
    Graph g;
    NoGrad ng(g);
    ForwardCfg cfg;
    cfg.training = false;
    cfg.observe_prequant = [&](const LayerSpec& l, const TensorPtr& t) {
        samples[l.name] = t->data;
    };
    // Observation requires quantizers active; use Fixed over a provisional
    // all-max assignment with unit steps. Outputs are discarded.
    BitAssignment provisional;
    for (size_t s = 0; s < model_.branches.size(); ++s) {
        AssignmentEntry e;
        e.layer_name = model_.spec.layers[model_.searched[s]].name;
        e.bits = model_.branches[s].act_bits[0];
        if (model_.branches[s].pair_mode())
            e.weight_bits = model_.branches[s].weight_bits[0];
        provisional.entries.push_back(e);
    }
    cfg.aq = ActQuant::Fixed;
    cfg.assignment = &provisional;
    model_.forward(g, batch->x, cfg);

    for (size_t i = 0; i < model_.spec.layers.size(); ++i) {
        const auto& l = model_.spec.layers[i];
        if (!l.quantizable()) continue;
        auto sit = samples.find(l.name);
        check(sit != samples.end(),
              "trainer: no calibration sample for layer '" + l.name + "'");
        const auto& sample = sit->second;
        auto& p = model_.params[i];
        if (l.quant == QuantRole::Searched) {
            auto& bs = model_.branches[p.search_slot];
            for (int b = 0; b < bs.size(); ++b)
                set_step(bs.act_specs[b],
                         init_step(sample, bs.act_bits[b], false));
        } else {
            set_step(p.fixed_act,
                     init_step(sample, p.fixed_act.bits, false));
        }
    }
    calibrated_ = true;
}

void Trainer::init_weight_steps() {
    for (size_t i = 0; i < model_.spec.layers.size(); ++i) {
        const auto& l = model_.spec.layers[i];
        if (!l.quantizable()) continue;
        auto& p = model_.params[i];
        set_step(p.weight_q,
                 init_step(p.weight->data, p.weight_q.bits, true));
        if (p.search_slot >= 0) {
            auto& bs = model_.branches[p.search_slot];
            for (auto& spec : bs.weight_specs)
                set_step(spec, init_step(p.weight->data, spec.bits, true));
        }
    }
}

void Trainer::log(const std::string& phase, real_t loss, real_t reg,
                  real_t lr) {
    if (!metrics_) return;
    real_t ebops = 0;
    if (cost_) {
        std::vector<BranchSet*> bs;
        for (auto& b : model_.branches) bs.push_back(&b);
        ebops = expected_bops(*cost_, bs);
    }
    metrics_->row(state_.epoch, state_.iter, phase, loss, reg, ebops, lr);
}

void Trainer::trace_alphas() {
    if (!alpha_trace_.is_open()) return;
    for (size_t s = 0; s < model_.branches.size(); ++s) {
        const auto& bs = model_.branches[s];
        const auto& name = model_.spec.layers[model_.searched[s]].name;
        const auto e = finalize(bs, name);
        for (int b = 0; b < bs.size(); ++b)
            alpha_trace_ << state_.iter << ',' << name << ',' << b << ','
                         << bs.act_bits[b] << ',' << bs.alphas->data[b] << ','
                         << e.alpha_softmax[b] << '\n';
    }
}

real_t Trainer::pretrain_step(const Batch& batch) {
    Graph g;
    ForwardCfg cfg;
    cfg.training = true;
    auto logits = model_.forward(g, batch.x, cfg);
    auto loss = ops::softmax_cross_entropy(g, logits, batch.labels);
    opt_->zero_grad();
    g.backward(loss);
    opt_->step();
    return loss->data[0];
}

void Trainer::pretrain(int epochs) {
    velocity_.clear();
    enter_phase(Phase::Pretrain);
    const real_t lr0 = plan_.lr_weights;
    for (int e = 0; e < epochs; ++e) {
        opt_->set_lr(0, lr0 * real_t(0.5) *
                            (1 + std::cos(kPi * e / std::max(1, epochs))));
        BatchStream stream(train_, {plan_.batch_size, true, plan_.augment},
                           state_.seed, state_.epoch, plan_.prefetch);
        while (auto b = stream.next()) {
            const real_t loss = pretrain_step(*b);
            ++state_.iter;
            if (state_.iter % 50 == 0) log("pretrain", loss, 0, opt_->lr(0));
        }
        ++state_.epoch;
    }
}

real_t Trainer::bit_meta_step(const Batch& batch) {
    const int B = model_.branches.empty()
                      ? 0
                      : model_.branches.front().size();
    check(B > 0, "bit_meta_step: model has no searched branches");
    assert_frozen_before();
    Graph g;
    TensorPtr total;
    for (int i = 0; i < B; ++i) {
        ForwardCfg cfg;
        cfg.aq = ActQuant::Meta;
        cfg.meta_branch = i;
        cfg.training = true;
        auto logits = model_.forward(g, batch.x, cfg);
        auto li = ops::softmax_cross_entropy(g, logits, batch.labels);
        total = total ? ops::add(g, total, li) : li;
    }
    auto loss = ops::scalar_mul(g, total, real_t(1) / B);
    opt_->zero_grad();
    g.backward(loss);
    opt_->step();
    model_.clamp_steps();
    assert_frozen_after("bit-meta");
    return loss->data[0];
}

real_t Trainer::bit_search_step(const Batch& batch) {
    check(cost_ != nullptr, "bit_search_step: no cost table attached");
    assert_frozen_before();
    Graph g;
    ForwardCfg cfg;
    cfg.aq = ActQuant::Mix;
    cfg.training = true;
    auto logits = model_.forward(g, batch.x, cfg);
    auto task = ops::softmax_cross_entropy(g, logits, batch.labels);
    std::vector<BranchSet*> bs;
    for (auto& b : model_.branches) bs.push_back(&b);
    auto reg = regularizer(g, *cost_, bs, reg_cfg_);
    // lambda_r applies to the relative budget violation r/t_bops so its
    // magnitude is comparable to the task loss at any network scale.
    const real_t lam = reg_cfg_.lambda_r / reg_cfg_.t_bops;
    auto loss = ops::add(g, task, ops::scalar_mul(g, reg, lam));
    opt_->zero_grad();
    g.backward(loss);
    opt_->step();
    assert_frozen_after("bit-search");
    log("bit_search", loss->data[0], reg->data[0],
        opt_->lr(0));
    trace_alphas();
    return loss->data[0];
}

BitAssignment Trainer::run_bit_selection() {
    if (!calibrated_) calibrate_act_steps();
    velocity_.clear();
    // Epoch(s) of pure bit-meta training.
    enter_phase(Phase::BitMeta);
    for (int e = 0; e < plan_.bit_meta_epochs; ++e) {
        BatchStream stream(train_, {plan_.batch_size, true, plan_.augment},
                           state_.seed, state_.epoch, plan_.prefetch);
        while (auto b = stream.next()) {
            const real_t loss = bit_meta_step(*b);
            ++state_.iter;
            if (state_.iter % 50 == 0) log("bit_meta", loss, 0, opt_->lr(0));
        }
        ++state_.epoch;
    }
    // Alternating epoch(s): meta_iters bit-meta steps, then search_iters
    // bit-search steps, over the epoch's batch stream.
    for (int e = 0; e < plan_.alternate_epochs; ++e) {
        BatchStream stream(train_, {plan_.batch_size, true, plan_.augment},
                           state_.seed, state_.epoch, plan_.prefetch);
        int in_cycle = 0;
        while (true) {
            const bool meta = in_cycle < plan_.meta_iters;
            auto b = stream.next();
            if (!b) break;
            if (meta) {
                enter_phase(Phase::BitMeta);
                bit_meta_step(*b);
            } else {
                enter_phase(Phase::BitSearch);
                bit_search_step(*b);
            }
            ++state_.iter;
            in_cycle = (in_cycle + 1) % (plan_.meta_iters + plan_.search_iters);
        }
        ++state_.epoch;
    }
    return model_.finalize_assignment();
}

real_t Trainer::fixed_step(const Batch& batch,
                           const BitAssignment& assignment,
                           bool quant_weights) {
    assert_frozen_before();
    Graph g;
    ForwardCfg cfg;
    cfg.aq = ActQuant::Fixed;
    cfg.assignment = &assignment;
    cfg.quant_weights = quant_weights;
    cfg.training = true;
    auto logits = model_.forward(g, batch.x, cfg);
    auto loss = ops::softmax_cross_entropy(g, logits, batch.labels);
    opt_->zero_grad();
    g.backward(loss);
    opt_->step();
    model_.clamp_steps();
    assert_frozen_after("fixed-bit");
    return loss->data[0];
}

FinetuneResult Trainer::run_weight_training(const BitAssignment& assignment) {
    for (size_t s = 0; s < model_.branches.size(); ++s)
        assignment.require(model_.spec.layers[model_.searched[s]].name);
    if (!calibrated_) calibrate_act_steps();
    init_weight_steps();
    velocity_.clear();
    enter_phase(Phase::Finetune);
    const real_t lr0 = plan_.lr_weights;
    FinetuneResult result;
    for (int e = 0; e < plan_.finetune_epochs; ++e) {
        if (plan_.cosine_finetune)
            opt_->set_lr(0, lr0 * real_t(0.5) *
                                (1 + std::cos(kPi * e /
                                              std::max(1, plan_.finetune_epochs))));
        BatchStream stream(train_, {plan_.batch_size, true, plan_.augment},
                           state_.seed, state_.epoch, plan_.prefetch);
        while (auto b = stream.next()) {
            const real_t loss = fixed_step(*b, assignment, true);
            ++state_.iter;
            if (state_.iter % 50 == 0) log("finetune", loss, 0, opt_->lr(0));
        }
        ++state_.epoch;
        ForwardCfg ecfg;
        ecfg.aq = ActQuant::Fixed;
        ecfg.assignment = &assignment;
        ecfg.quant_weights = true;
        result.per_epoch_accuracy.push_back(accuracy(test_, ecfg));
    }
    ForwardCfg ecfg;
    ecfg.aq = ActQuant::Fixed;
    ecfg.assignment = &assignment;
    ecfg.quant_weights = true;
    result.test_accuracy = plan_.finetune_epochs > 0
                               ? result.per_epoch_accuracy.back()
                               : accuracy(test_, ecfg);
    if (cost_) result.model_bops = bops(*cost_, assignment);
    return result;
}

real_t Trainer::accuracy(const Dataset& ds, const ForwardCfg& cfg,
                         i64 batch_size) {
    BatchIterator it(ds, {batch_size, false, false}, state_.seed, 0);
    i64 correct = 0;
    ForwardCfg ecfg = cfg;
    ecfg.training = false;
    while (auto b = it.next()) {
        Graph g;
        NoGrad ng(g);
        auto logits = model_.forward(g, b->x, ecfg);
        const i64 n = logits->shape[0];
        const i64 c = logits->shape[1];
        for (i64 i = 0; i < n; ++i) {
            const real_t* row = logits->data.data() + i * c;
            const i64 pred = std::max_element(row, row + c) - row;
            if (pred == b->labels[static_cast<size_t>(i)]) ++correct;
        }
    }
    return static_cast<real_t>(correct) / static_cast<real_t>(ds.n);
}

}  // namespace bitmix
