#pragma once

#include <string>
#include <vector>

#include "bitmix/trainer.hpp"

namespace bitmix {

struct StatRecord {
    i64 iteration = 0;
    std::string layer;
    std::string statistic;  // bn_running_var | bn_running_mean | act_var
    real_t value = 0;
};

struct StatTrace {
    std::vector<StatRecord> records;

    // Iterations strictly increasing per (layer, statistic).
    void validate() const;
    std::string to_csv() const;
};

// Training regimes whose BN statistics get traced: the monitored layers'
// activation bit is re-drawn from the candidates every epoch (other searched
// layers sit at the middle candidate), with full-precision or 4-bit
// quantized weights; or multi-bit averaged weight training.
enum class BNRegime { RandomBitFP, RandomBitQ4, BitMeta };

struct BNTraceCfg {
    BNRegime regime = BNRegime::RandomBitFP;
    int epochs = 4;
    int record_every = 10;
    std::uint64_t seed = 0;
};

// Records the channel-mean running variance/mean of every BN layer whose
// name contains `selector`, every record_every iterations of the regime.
StatTrace trace_bn(Trainer& trainer, const std::string& selector,
                   const BNTraceCfg& cfg);

// std/mean of the bn_running_var series tail; the stability figure of merit.
real_t bn_fluctuation(const StatTrace& trace, const std::string& layer,
                      size_t window);

struct Histogram {
    std::string layer;
    int bits = 0;  // 0 = full precision config
    real_t lo = 0, hi = 0;
    std::vector<i64> counts;  // fixed bin count over [lo, hi]

    i64 total() const;
    std::string to_csv() const;
};

// Histogram of the tensor feeding `layer`'s quantizer while the network runs
// with every searched layer at `bits` (0 = no quantization), eval mode.
Histogram act_histogram(Model& model, const std::string& layer, int bits,
                        const Dataset& sample, i64 batch_size = 256,
                        int bins = 128);

// Variance of the observed pre-quantizer activation under a uniform-bit
// config; the cross-bit consistency number behind the histogram comparison.
real_t act_variance(Model& model, const std::string& layer, int bits,
                    const Dataset& sample, i64 batch_size = 256);

struct QGaussRow {
    int bits = 0;  // 0 = unquantized
    real_t step = 0;
    real_t variance = 0;
};

// Standard-normal samples quantized with signed quantizers whose steps use
// the signed LSQ initialization; lower precision yields larger variance.
std::vector<QGaussRow> quantized_gaussian_variance(
    const std::vector<int>& bits_list, i64 n, std::uint64_t seed);

std::string qgauss_to_csv(const std::vector<QGaussRow>& rows);

struct HessianRow {
    std::string layer;
    i64 ops = 0;
    real_t trace = 0;
    real_t trace_per_op = 0;
};

// tr(H) of loss_fn w.r.t. theta: mean over probes of v' H v, Rademacher v,
// Hv = (g(theta + eps v) - g(theta - eps v)) / (2 eps). loss_fn must build
// the loss from theta's current values. theta is restored bit-exactly.
real_t hutchinson_trace(const TensorPtr& theta,
                        const std::function<TensorPtr(Graph&)>& loss_fn,
                        int probes, std::mt19937_64& rng,
                        real_t eps_scale = real_t(1e-3));

// Hutchinson trace estimate per layer: tr(H) ~ E[v' H v] with Rademacher v,
// Hv by central finite differences of the gradient, epsilon scaled to the
// parameter norm. Read-only: parameters are restored bit-exactly.
std::vector<HessianRow> hessian_trace_per_op(
    Model& model, const CostTable& ct, const Dataset& data, i64 batch_size,
    int probes, std::uint64_t seed, real_t eps_scale = real_t(1e-3));

std::string hessian_to_csv(const std::vector<HessianRow>& rows);

// Spearman rank correlation; reported alongside bit assignments.
real_t rank_correlation(std::span<const real_t> a, std::span<const real_t> b);

}  // namespace bitmix
