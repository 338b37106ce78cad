#pragma once

#include "bitmix/tensor.hpp"

namespace bitmix {

// One uniform fake-quantizer instance: bit-width, signedness and a trainable
// step size. The representable range spans (2^bits - 1) * step in both the
// signed and unsigned layouts.
struct QuantSpec {
    int bits = 8;
    bool is_signed = false;
    TensorPtr step;        // scalar, requires_grad when trainable
    bool trainable = true;
    bool lsq_grad_scale = true;  // scale step gradients by 1/sqrt(N * qmax)

    real_t qmin() const {
        return is_signed ? -static_cast<real_t>(i64(1) << (bits - 1)) : 0;
    }
    real_t qmax() const {
        return is_signed ? static_cast<real_t>((i64(1) << (bits - 1)) - 1)
                         : static_cast<real_t>((i64(1) << bits) - 1);
    }
    real_t step_value() const { return step ? step->data[0] : real_t(0); }
};

QuantSpec make_quant_spec(int bits, bool is_signed, real_t step,
                          bool trainable = true, bool lsq_grad_scale = true);

// Step initialization from a data sample: 2*mean(|x|)/sqrt(Qp) with
// Qp = 2^bits - 1 (unsigned) or 2^(bits-1) - 1 (signed, the positive clamp
// level). Falls back to 1 when the sample is all zero.
real_t init_step(std::span<const real_t> sample, int bits, bool is_signed);
void set_step(QuantSpec& spec, real_t value);

// Fake quantization:
//   unsigned: y = step * clamp(round(x/step), 0, 2^bits - 1)
//   signed:   y = step * clamp(round(x/step), -2^(bits-1), 2^(bits-1) - 1)
// Gradient w.r.t. x is straight-through (1 in range, 0 clipped); gradient
// w.r.t. step follows LSQ: round(z) - z in range, clamp level when clipped,
// optionally scaled by 1/sqrt(N * qmax).
TensorPtr quantize(Graph& g, const TensorPtr& x, const QuantSpec& spec);

// quantize with is_signed enforced (weight path).
TensorPtr quantize_weights(Graph& g, const TensorPtr& w, const QuantSpec& spec);

// Re-applies the positivity floor after an optimizer step.
void clamp_step(QuantSpec& spec, real_t floor = real_t(1e-8));

}  // namespace bitmix
