#include <algorithm>
#include <cmath>

#include "bitmix/kernels.hpp"
#include "bitmix/quant.hpp"

namespace bitmix {

QuantSpec make_quant_spec(int bits, bool is_signed, real_t step,
                          bool trainable, bool lsq_grad_scale) {
    check(bits >= 2, "quant: bits must be >= 2, got " + std::to_string(bits));
    check(step > 0, "quant: step must be positive");
    QuantSpec spec;
    spec.bits = bits;
    spec.is_signed = is_signed;
    spec.step = scalar(step, trainable);
    spec.trainable = trainable;
    spec.lsq_grad_scale = lsq_grad_scale;
    return spec;
}

real_t init_step(std::span<const real_t> sample, int bits, bool is_signed) {
    check(!sample.empty(), "init_step: empty sample");
    check(bits >= 2, "init_step: bits must be >= 2");
    real_t acc = 0;
    for (real_t v : sample) acc += std::abs(v);
    const real_t mean_abs = acc / static_cast<real_t>(sample.size());
    if (mean_abs == 0) return 1;
    const real_t qp = is_signed
                          ? static_cast<real_t>((i64(1) << (bits - 1)) - 1)
                          : static_cast<real_t>((i64(1) << bits) - 1);
    return 2 * mean_abs / std::sqrt(qp);
}

void set_step(QuantSpec& spec, real_t value) {
    check(value > 0, "quant: step must be positive");
    spec.step->data[0] = value;
}

TensorPtr quantize(Graph& g, const TensorPtr& x, const QuantSpec& spec) {
    check(spec.bits >= 2, "quantize: bits must be >= 2");
    check(spec.step != nullptr && spec.step->numel() == 1,
          "quantize: spec has no scalar step");
    const real_t step = spec.step->data[0];
    check(step > 0, "quantize: step must be positive, got " +
                        std::to_string(step));
    const real_t qmin = spec.qmin();
    const real_t qmax = spec.qmax();
    auto out = make_tensor(x->shape);
    kern::ops().fq_forward(x->data.data(), out->data.data(), x->data.size(),
                           step, qmin, qmax);
    const bool step_grad = spec.trainable && spec.step->requires_grad;
    if (g.recording() && (x->requires_grad || step_grad)) {
        out->requires_grad = true;
        out->grad_leaf = false;
        const real_t scale =
            spec.lsq_grad_scale
                ? real_t(1) / std::sqrt(static_cast<real_t>(x->numel()) * qmax)
                : real_t(1);
        auto step_t = spec.step;
        g.record({x, step_t}, out,
                 [x, step_t, out, step, qmin, qmax, scale,
                  step_grad](Graph& g) {
                     const auto& go = g.cot(out);
                     real_t* gx =
                         x->requires_grad ? g.cot(x).data() : nullptr;
                     real_t gs = 0;
                     kern::ops().fq_backward(x->data.data(), go.data(), gx,
                                             go.size(), step, qmin, qmax,
                                             &gs);
                     if (step_grad) g.cot(step_t)[0] += scale * gs;
                 });
    }
    return out;
}

TensorPtr quantize_weights(Graph& g, const TensorPtr& w,
                           const QuantSpec& spec) {
    check(spec.is_signed, "quantize_weights: spec must be signed");
    return quantize(g, w, spec);
}

void clamp_step(QuantSpec& spec, real_t floor) {
    if (spec.step && spec.step->data[0] < floor) spec.step->data[0] = floor;
}

}  // namespace bitmix
