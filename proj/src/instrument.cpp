#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "bitmix/instrument.hpp"

namespace bitmix {

void StatTrace::validate() const {
    std::map<std::pair<std::string, std::string>, i64> last;
    for (const auto& r : records) {
        auto key = std::make_pair(r.layer, r.statistic);
        auto it = last.find(key);
        if (it != last.end())
            check(r.iteration > it->second,
                  "stat trace: iterations must strictly increase per (layer, "
                  "statistic)");
        last[key] = r.iteration;
    }
}

std::string StatTrace::to_csv() const {
    std::ostringstream os;
    os << "iteration,layer,statistic,value\n";
    for (const auto& r : records)
        os << r.iteration << ',' << r.layer << ',' << r.statistic << ','
           << r.value << '\n';
    return os.str();
}

namespace {

real_t mean_of(std::span<const real_t> v) {
    real_t s = 0;
    for (real_t x : v) s += x;
    return s / static_cast<real_t>(v.size());
}

}  // namespace

StatTrace trace_bn(Trainer& trainer, const std::string& selector,
                   const BNTraceCfg& cfg) {
    Model& m = trainer.model();
    std::vector<int> monitored;
    for (size_t i = 0; i < m.spec.layers.size(); ++i)
        if (m.spec.layers[i].bn &&
            m.spec.layers[i].name.find(selector) != std::string::npos)
            monitored.push_back(static_cast<int>(i));
    check(!monitored.empty(),
          "trace_bn: selector '" + selector + "' matches no BN layer");

    const auto& candidates = m.setup.candidates;
    const int mid = candidates[candidates.size() / 2];
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<size_t> pick(0, candidates.size() - 1);

    StatTrace trace;
    i64 iter = 0;
    auto record = [&] {
        for (int li : monitored) {
            const auto& p = m.params[li];
            trace.records.push_back(
                {iter, m.spec.layers[li].name, "bn_running_var",
                 mean_of(p.bn_state.running_var->data)});
            trace.records.push_back(
                {iter, m.spec.layers[li].name, "bn_running_mean",
                 mean_of(p.bn_state.running_mean->data)});
        }
    };

    if (cfg.regime == BNRegime::BitMeta) {
        trainer.enter_phase(Trainer::Phase::BitMeta);
        for (int e = 0; e < cfg.epochs; ++e) {
            BatchStream stream(trainer.train_set(),
                               {trainer.plan().batch_size, true,
                                trainer.plan().augment},
                               cfg.seed, e, trainer.plan().prefetch);
            while (auto b = stream.next()) {
                if (iter % cfg.record_every == 0) record();
                trainer.bit_meta_step(*b);
                ++iter;
            }
        }
        trace.validate();
        return trace;
    }

    // Random-bit-per-epoch regimes with a fixed-assignment forward.
    const bool quant_weights = cfg.regime == BNRegime::RandomBitQ4;
    trainer.enter_phase(Trainer::Phase::Finetune);
    for (int e = 0; e < cfg.epochs; ++e) {
        BitAssignment a;
        const int random_bit = candidates[pick(rng)];
        for (size_t s = 0; s < m.branches.size(); ++s) {
            AssignmentEntry entry;
            const int li = m.searched[s];
            entry.layer_name = m.spec.layers[li].name;
            const bool is_monitored =
                std::find(monitored.begin(), monitored.end(), li) !=
                monitored.end();
            entry.bits = is_monitored ? random_bit : mid;
            if (m.branches[s].pair_mode())
                entry.weight_bits = m.setup.weight_bits;
            a.entries.push_back(entry);
        }
        BatchStream stream(trainer.train_set(),
                           {trainer.plan().batch_size, true,
                            trainer.plan().augment},
                           cfg.seed, e, trainer.plan().prefetch);
        while (auto b = stream.next()) {
            if (iter % cfg.record_every == 0) record();
            trainer.fixed_step(*b, a, quant_weights);
            ++iter;
        }
    }
    trace.validate();
    return trace;
}

real_t bn_fluctuation(const StatTrace& trace, const std::string& layer,
                      size_t window) {
    std::vector<real_t> series;
    for (const auto& r : trace.records)
        if (r.layer == layer && r.statistic == "bn_running_var")
            series.push_back(r.value);
    check(series.size() >= window && window >= 2,
          "bn_fluctuation: series shorter than window");
    const size_t start = series.size() - window;
    real_t m = 0;
    for (size_t i = start; i < series.size(); ++i) m += series[i];
    m /= static_cast<real_t>(window);
    real_t var = 0;
    for (size_t i = start; i < series.size(); ++i)
        var += (series[i] - m) * (series[i] - m);
    var /= static_cast<real_t>(window - 1);
    check(m > 0, "bn_fluctuation: non-positive mean running variance");
    return std::sqrt(var) / m;
}

namespace {

// Pre-quantizer sample of `layer` under a uniform-bit eval config.
std::vector<real_t> observe_layer(Model& model, const std::string& layer,
                                  int bits, const Dataset& sample,
                                  i64 batch_size) {
    check(sample.n > 0, "act observation: empty sample");
    model.layer(layer);  // validates the name
    BitAssignment uniform;
    for (size_t s = 0; s < model.branches.size(); ++s) {
        AssignmentEntry e;
        e.layer_name = model.spec.layers[model.searched[s]].name;
        e.bits = bits > 0 ? bits : model.branches[s].act_bits[0];
        if (model.branches[s].pair_mode())
            e.weight_bits = model.setup.weight_bits;
        uniform.entries.push_back(e);
    }
    std::vector<real_t> values;
    ForwardCfg cfg;
    cfg.training = false;
    cfg.aq = bits > 0 ? ActQuant::Fixed : ActQuant::None;
    cfg.assignment = &uniform;
    cfg.observe_prequant = [&](const LayerSpec& l, const TensorPtr& t) {
        if (l.name == layer)
            values.insert(values.end(), t->data.begin(), t->data.end());
    };
    BatchIterator it(sample, {batch_size, false, false}, 0, 0);
    while (auto b = it.next()) {
        Graph g;
        NoGrad ng(g);
        model.forward(g, b->x, cfg);
    }
    check(!values.empty(),
          "act observation: layer '" + layer + "' has no quantizer input");
    return values;
}

}  // namespace

Histogram act_histogram(Model& model, const std::string& layer, int bits,
                        const Dataset& sample, i64 batch_size, int bins) {
    const auto values = observe_layer(model, layer, bits, sample, batch_size);
    Histogram h;
    h.layer = layer;
    h.bits = bits;
    h.counts.assign(static_cast<size_t>(bins), 0);
    auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    h.lo = *lo_it;
    h.hi = *hi_it;
    const real_t span = h.hi - h.lo;
    for (real_t v : values) {
        int b = span == 0 ? 0
                          : static_cast<int>((v - h.lo) / span * bins);
        if (b >= bins) b = bins - 1;
        ++h.counts[static_cast<size_t>(b)];
    }
    return h;
}

real_t act_variance(Model& model, const std::string& layer, int bits,
                    const Dataset& sample, i64 batch_size) {
    const auto values = observe_layer(model, layer, bits, sample, batch_size);
    const real_t m = mean_of(values);
    real_t var = 0;
    for (real_t v : values) var += (v - m) * (v - m);
    return var / static_cast<real_t>(values.size());
}

i64 Histogram::total() const {
    i64 t = 0;
    for (i64 c : counts) t += c;
    return t;
}

std::string Histogram::to_csv() const {
    std::ostringstream os;
    os << "# layer=" << layer << " bits=" << bits << " lo=" << lo
       << " hi=" << hi << "\n";
    os << "bin,count\n";
    for (size_t i = 0; i < counts.size(); ++i)
        os << i << ',' << counts[i] << '\n';
    return os.str();
}

std::vector<QGaussRow> quantized_gaussian_variance(
    const std::vector<int>& bits_list, i64 n, std::uint64_t seed) {
    check(n >= 100000, "quantized_gaussian_variance: n must be >= 1e5");
    std::mt19937_64 rng(seed);
    std::normal_distribution<real_t> unit(0, 1);
    std::vector<real_t> x(static_cast<size_t>(n));
    for (auto& v : x) v = unit(rng);

    auto variance = [](std::span<const real_t> v) {
        const real_t m = mean_of(v);
        real_t s = 0;
        for (real_t u : v) s += (u - m) * (u - m);
        return s / static_cast<real_t>(v.size());
    };

    std::vector<QGaussRow> rows;
    rows.push_back({0, 0, variance(x)});
    Graph g;
    NoGrad ng(g);
    auto xt = from_data({n}, x);
    for (int b : bits_list) {
        QuantSpec spec = make_quant_spec(b, true, 1, false);
        set_step(spec, init_step(x, b, true));
        auto q = quantize(g, xt, spec);
        rows.push_back({b, spec.step_value(), variance(q->data)});
    }
    return rows;
}

std::string qgauss_to_csv(const std::vector<QGaussRow>& rows) {
    std::ostringstream os;
    os << "bits,step,variance\n";
    for (const auto& r : rows)
        os << r.bits << ',' << r.step << ',' << r.variance << '\n';
    return os.str();
}

real_t hutchinson_trace(const TensorPtr& theta,
                        const std::function<TensorPtr(Graph&)>& loss_fn,
                        int probes, std::mt19937_64& rng, real_t eps_scale) {
    check(probes >= 1, "hutchinson_trace: probes must be >= 1");
    auto grad_at = [&] {
        Graph g;
        auto loss = loss_fn(g);
        theta->zero_grad();
        g.backward(loss);
        auto grad = theta->grad.empty()
                        ? std::vector<real_t>(theta->data.size(), 0)
                        : theta->grad;
        theta->zero_grad();
        return grad;
    };
    std::bernoulli_distribution coin(0.5);
    const std::vector<real_t> original = theta->data;
    const size_t n = theta->data.size();
    real_t sq = 0;
    for (real_t v : original) sq += v * v;
    const real_t eps = eps_scale * std::max<real_t>(std::sqrt(sq), real_t(1e-3)) /
                       std::sqrt(static_cast<real_t>(n));
    real_t acc = 0;
    for (int p = 0; p < probes; ++p) {
        std::vector<real_t> v(n);
        for (auto& e : v) e = coin(rng) ? real_t(1) : real_t(-1);
        for (size_t j = 0; j < n; ++j)
            theta->data[j] = original[j] + eps * v[j];
        const auto gp = grad_at();
        for (size_t j = 0; j < n; ++j)
            theta->data[j] = original[j] - eps * v[j];
        const auto gm = grad_at();
        theta->data = original;
        real_t vHv = 0;
        for (size_t j = 0; j < n; ++j)
            vHv += v[j] * (gp[j] - gm[j]) / (2 * eps);
        acc += vHv;
    }
    theta->data = original;
    return acc / probes;
}

std::vector<HessianRow> hessian_trace_per_op(
    Model& model, const CostTable& ct, const Dataset& data, i64 batch_size,
    int probes, std::uint64_t seed, real_t eps_scale) {
    check(probes >= 10, "hessian_trace_per_op: probes must be >= 10");
    BatchIterator it(data, {batch_size, false, false}, seed, 0);
    auto batch = it.next();
    check(batch.has_value(), "hessian_trace_per_op: empty data sample");

    std::mt19937_64 rng(seed);

    // Only the probed layer's weight carries requires_grad while probing.
    std::vector<TensorPtr> all = model.weights();
    std::vector<bool> saved_rq;
    for (auto& t : all) {
        saved_rq.push_back(t->requires_grad);
        t->requires_grad = false;
    }

    auto loss_fn = [&](Graph& g) {
        ForwardCfg cfg;
        cfg.training = false;
        auto logits = model.forward(g, batch->x, cfg);
        return ops::softmax_cross_entropy(g, logits, batch->labels);
    };

    std::vector<HessianRow> rows;
    for (size_t i = 0; i < model.spec.layers.size(); ++i) {
        const auto& l = model.spec.layers[i];
        if (!l.quantizable()) continue;
        const LayerCost* lc = nullptr;
        for (const auto& c : ct.layers)
            if (c.name == l.name) lc = &c;
        check(lc != nullptr, "hessian_trace_per_op: layer '" + l.name +
                                 "' missing from cost table");
        auto w = model.params[i].weight;
        w->requires_grad = true;
        const real_t trace =
            hutchinson_trace(w, loss_fn, probes, rng, eps_scale);
        w->requires_grad = false;
        if (!std::isfinite(trace))
            fail("hessian_trace_per_op: non-finite trace estimate for layer '" +
                 l.name + "' (loss may be unstable at the probe scale)");
        rows.push_back({l.name, lc->ops, trace,
                        trace / static_cast<real_t>(lc->ops)});
    }
    for (size_t i = 0; i < all.size(); ++i)
        all[i]->requires_grad = saved_rq[i];
    return rows;
}

std::string hessian_to_csv(const std::vector<HessianRow>& rows) {
    std::ostringstream os;
    os << "layer,ops,trace,trace_per_op\n";
    for (const auto& r : rows)
        os << r.layer << ',' << r.ops << ',' << r.trace << ','
           << r.trace_per_op << '\n';
    return os.str();
}

real_t rank_correlation(std::span<const real_t> a, std::span<const real_t> b) {
    check(a.size() == b.size() && a.size() >= 2,
          "rank_correlation: need two equal-length series");
    auto ranks = [](std::span<const real_t> v) {
        std::vector<size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<real_t> r(v.size());
        // Average ranks over ties.
        size_t i = 0;
        while (i < idx.size()) {
            size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const real_t avg = (static_cast<real_t>(i) + j) / 2 + 1;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const real_t ma = mean_of(ra), mb = mean_of(rb);
    real_t num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    check(da > 0 && db > 0, "rank_correlation: degenerate series");
    return num / std::sqrt(da * db);
}

}  // namespace bitmix
