#pragma once

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bitmix/common.hpp"

namespace bitmix {

// Dense n-d value array with an optional gradient slot. Gradients are empty
// until a backward pass reaches the tensor; they accumulate additively
// across backward calls until cleared.
struct Tensor {
    std::vector<i64> shape;
    std::vector<real_t> data;
    std::vector<real_t> grad;
    bool requires_grad = false;
    // Cleared on op outputs: backward materializes .grad only for leaves.
    bool grad_leaf = true;

    i64 numel() const { return static_cast<i64>(data.size()); }
    i64 dim(size_t i) const { return shape.at(i); }

    std::vector<real_t>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), real_t(0));
        return grad;
    }
    void zero_grad() { grad.clear(); }
};

using TensorPtr = std::shared_ptr<Tensor>;

i64 shape_numel(const std::vector<i64>& shape);
std::string shape_str(const std::vector<i64>& shape);

TensorPtr make_tensor(std::vector<i64> shape, bool requires_grad = false);
TensorPtr full(std::vector<i64> shape, real_t value, bool requires_grad = false);
TensorPtr from_data(std::vector<i64> shape, std::vector<real_t> data,
                    bool requires_grad = false);
TensorPtr scalar(real_t value, bool requires_grad = false);
TensorPtr randn(std::vector<i64> shape, std::mt19937_64& rng, real_t stddev = 1,
                bool requires_grad = false);

// Tape of recorded operations. Eager: ops append records in execution order,
// so reverse iteration is reverse-topological. One tape per training step;
// clear() (or destruction) drops the recording.
class Graph {
  public:
    using BackwardFn = std::function<void(Graph&)>;

    void record(std::vector<TensorPtr> inputs, TensorPtr output, BackwardFn fn);

    // Seeds d(loss)/d(loss) = 1 and propagates. Cotangents live in per-call
    // buffers; on completion they are added into .grad of every
    // requires_grad tensor reached, so calling backward twice on the same
    // tape doubles every gradient exactly.
    void backward(const TensorPtr& loss);

    void clear();
    size_t size() const { return tape_.size(); }

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    // Cotangent buffer access, valid inside backward closures.
    std::vector<real_t>& cot(const TensorPtr& t);
    std::vector<real_t>& cot(Tensor* t);
    const std::vector<real_t>* cot_if(const Tensor* t) const;

  private:
    struct Record {
        std::vector<TensorPtr> inputs;
        TensorPtr output;
        BackwardFn fn;
    };
    std::vector<Record> tape_;
    std::unordered_map<Tensor*, std::vector<real_t>> cot_;
    bool recording_ = true;
};

// Scoped recording off-switch for eval passes.
struct NoGrad {
    explicit NoGrad(Graph& g) : g_(g), prev_(g.recording()) {
        g_.set_recording(false);
    }
    ~NoGrad() { g_.set_recording(prev_); }
    Graph& g_;
    bool prev_;
};

namespace ops {

TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b);
TensorPtr scalar_mul(Graph& g, const TensorPtr& x, real_t c);
TensorPtr add_const(Graph& g, const TensorPtr& x, real_t c);
TensorPtr sum(Graph& g, const TensorPtr& x);
TensorPtr mean(Graph& g, const TensorPtr& x);
TensorPtr relu(Graph& g, const TensorPtr& x);
TensorPtr relu6(Graph& g, const TensorPtr& x);
TensorPtr abs_scalar(Graph& g, const TensorPtr& x);

// out = sum_i w[i] * xs[i]; w is 1-D with length xs.size().
TensorPtr weighted_sum(Graph& g, const std::vector<TensorPtr>& xs,
                       const TensorPtr& w);

// out = sum_i x[i] * coef[i] (coef constant); x is 1-D.
TensorPtr dot_const(Graph& g, const TensorPtr& x, std::vector<real_t> coef);

// 1-D softmax.
TensorPtr softmax(Graph& g, const TensorPtr& x);

// x: [N, Cin, H, W]; w: [Cout, Cin/groups, kh, kw]; cross-correlation.
TensorPtr conv2d(Graph& g, const TensorPtr& x, const TensorPtr& w, int stride,
                 int padding, int groups);

// x: [N, in]; w: [out, in]; bias: [out] or null.
TensorPtr linear(Graph& g, const TensorPtr& x, const TensorPtr& w,
                 const TensorPtr& bias);

// Running statistics for one BN layer; updated in training mode.
struct BNState {
    TensorPtr running_mean;
    TensorPtr running_var;
};

// x: [N, C, H, W] or [N, C]. Training mode normalizes by batch statistics
// and folds them into the running state with the given momentum; eval mode
// uses the running state. Differentiable w.r.t. x, gamma, beta.
TensorPtr batch_norm(Graph& g, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, BNState& state, real_t momentum,
                     real_t eps, bool training);

// x: [N, C, H, W] -> [N, C].
TensorPtr global_avg_pool(Graph& g, const TensorPtr& x);

// logits: [N, C]; labels in [0, C). Mean cross-entropy over the batch.
TensorPtr softmax_cross_entropy(Graph& g, const TensorPtr& logits,
                                std::span<const int> labels);

// Custom-gradient operation: forward runs fwd exactly; backward runs bwd
// exactly, bypassing autodiff of the forward. bwd returns one cotangent per
// input (empty vector = no gradient); sizes must match the inputs.
using CustomForwardFn = std::function<Tensor(const std::vector<TensorPtr>&)>;
using CustomBackwardFn = std::function<std::vector<std::vector<real_t>>(
    const std::vector<TensorPtr>& inputs, const Tensor& output,
    const std::vector<real_t>& out_cot)>;

TensorPtr apply_custom(Graph& g, std::vector<TensorPtr> inputs,
                       CustomForwardFn fwd, CustomBackwardFn bwd);

// Packages the pair as a reusable differentiable operation.
inline auto custom_grad(CustomForwardFn fwd, CustomBackwardFn bwd) {
    return [fwd = std::move(fwd), bwd = std::move(bwd)](
               Graph& g, std::vector<TensorPtr> inputs) {
        return apply_custom(g, std::move(inputs), fwd, bwd);
    };
}

}  // namespace ops
}  // namespace bitmix
