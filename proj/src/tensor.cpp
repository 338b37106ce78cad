#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "bitmix/kernels.hpp"
#include "bitmix/tensor.hpp"

namespace bitmix {

i64 shape_numel(const std::vector<i64>& shape) {
    i64 n = 1;
    for (i64 d : shape) {
        check(d > 0, "tensor: shape dimensions must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<i64>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

TensorPtr make_tensor(std::vector<i64> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    const i64 n = shape_numel(shape);
    t->shape = std::move(shape);
    t->data.assign(static_cast<size_t>(n), real_t(0));
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr full(std::vector<i64> shape, real_t value, bool requires_grad) {
    auto t = make_tensor(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

TensorPtr from_data(std::vector<i64> shape, std::vector<real_t> data,
                    bool requires_grad) {
    const i64 n = shape_numel(shape);
    check(n == static_cast<i64>(data.size()),
          "tensor: data length does not match shape " + shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr scalar(real_t value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

TensorPtr randn(std::vector<i64> shape, std::mt19937_64& rng, real_t stddev,
                bool requires_grad) {
    auto t = make_tensor(std::move(shape), requires_grad);
    std::normal_distribution<real_t> dist(0, stddev);
    for (auto& v : t->data) v = dist(rng);
    return t;
}

void Graph::record(std::vector<TensorPtr> inputs, TensorPtr output,
                   BackwardFn fn) {
    tape_.push_back({std::move(inputs), std::move(output), std::move(fn)});
}

std::vector<real_t>& Graph::cot(Tensor* t) {
    auto it = cot_.find(t);
    if (it == cot_.end())
        it = cot_.emplace(t, std::vector<real_t>(t->data.size(), real_t(0)))
                 .first;
    return it->second;
}

std::vector<real_t>& Graph::cot(const TensorPtr& t) { return cot(t.get()); }

const std::vector<real_t>* Graph::cot_if(const Tensor* t) const {
    auto it = cot_.find(const_cast<Tensor*>(t));
    return it == cot_.end() ? nullptr : &it->second;
}

void Graph::backward(const TensorPtr& loss) {
    check(loss != nullptr, "backward: null loss");
    check(loss->numel() == 1, "backward: loss must be scalar, got shape " +
                                  shape_str(loss->shape));
    cot_.clear();
    cot(loss)[0] = real_t(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
        if (!it->output->requires_grad) continue;
        if (!cot_if(it->output.get())) continue;
        it->fn(*this);
    }
    // Commit cotangents into persistent gradients, once per tensor.
    // Per-tensor adds are independent, so map order does not matter.
    for (auto& [t, c] : cot_) {
        if (!t->requires_grad || !t->grad_leaf) continue;
        auto& grad = t->ensure_grad();
        kern::ops().add(grad.data(), c.data(), grad.data(), grad.size());
    }
    cot_.clear();
}

void Graph::clear() {
    tape_.clear();
    cot_.clear();
}

namespace ops {
namespace {

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

bool track(const Graph& g, std::initializer_list<const TensorPtr*> ins) {
    if (!g.recording()) return false;
    for (const auto* t : ins)
        if (*t && (*t)->requires_grad) return true;
    return false;
}

}  // namespace

TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b) {
    check(same_shape(*a, *b), "add: shape mismatch " + shape_str(a->shape) +
                                  " vs " + shape_str(b->shape));
    auto out = make_tensor(a->shape);
    kern::ops().add(a->data.data(), b->data.data(), out->data.data(),
                    out->data.size());
    if (track(g, {&a, &b})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({a, b}, out, [a, b, out](Graph& g) {
            const auto& go = g.cot(out);
            if (a->requires_grad)
                kern::ops().axpy(1, go.data(), g.cot(a).data(), go.size());
            if (b->requires_grad)
                kern::ops().axpy(1, go.data(), g.cot(b).data(), go.size());
        });
    }
    return out;
}

TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b) {
    check(same_shape(*a, *b), "mul: shape mismatch " + shape_str(a->shape) +
                                  " vs " + shape_str(b->shape));
    auto out = make_tensor(a->shape);
    kern::ops().mul(a->data.data(), b->data.data(), out->data.data(),
                    out->data.size());
    if (track(g, {&a, &b})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({a, b}, out, [a, b, out](Graph& g) {
            const auto& go = g.cot(out);
            const size_t n = go.size();
            if (a->requires_grad) {
                auto& ga = g.cot(a);
                for (size_t i = 0; i < n; ++i) ga[i] += go[i] * b->data[i];
            }
            if (b->requires_grad) {
                auto& gb = g.cot(b);
                for (size_t i = 0; i < n; ++i) gb[i] += go[i] * a->data[i];
            }
        });
    }
    return out;
}

TensorPtr scalar_mul(Graph& g, const TensorPtr& x, real_t c) {
    auto out = make_tensor(x->shape);
    for (size_t i = 0; i < x->data.size(); ++i) out->data[i] = c * x->data[i];
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out, c](Graph& g) {
            const auto& go = g.cot(out);
            kern::ops().axpy(c, go.data(), g.cot(x).data(), go.size());
        });
    }
    return out;
}

TensorPtr add_const(Graph& g, const TensorPtr& x, real_t c) {
    auto out = make_tensor(x->shape);
    for (size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] + c;
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out](Graph& g) {
            const auto& go = g.cot(out);
            kern::ops().axpy(1, go.data(), g.cot(x).data(), go.size());
        });
    }
    return out;
}

TensorPtr sum(Graph& g, const TensorPtr& x) {
    auto out = scalar(kern::ops().sum(x->data.data(), x->data.size()));
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out](Graph& g) {
            const real_t go = g.cot(out)[0];
            auto& gx = g.cot(x);
            for (auto& v : gx) v += go;
        });
    }
    return out;
}

TensorPtr mean(Graph& g, const TensorPtr& x) {
    const real_t inv = real_t(1) / static_cast<real_t>(x->numel());
    auto out = scalar(kern::ops().sum(x->data.data(), x->data.size()) * inv);
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out, inv](Graph& g) {
            const real_t go = g.cot(out)[0] * inv;
            auto& gx = g.cot(x);
            for (auto& v : gx) v += go;
        });
    }
    return out;
}

namespace {

TensorPtr clamp_act(Graph& g, const TensorPtr& x, real_t lo, real_t hi) {
    auto out = make_tensor(x->shape);
    for (size_t i = 0; i < x->data.size(); ++i)
        out->data[i] = std::min(std::max(x->data[i], lo), hi);
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out, lo, hi](Graph& g) {
            const auto& go = g.cot(out);
            auto& gx = g.cot(x);
            for (size_t i = 0; i < go.size(); ++i)
                if (x->data[i] > lo && x->data[i] < hi) gx[i] += go[i];
        });
    }
    return out;
}

}  // namespace

TensorPtr relu(Graph& g, const TensorPtr& x) {
    return clamp_act(g, x, 0, std::numeric_limits<real_t>::infinity());
}

TensorPtr relu6(Graph& g, const TensorPtr& x) { return clamp_act(g, x, 0, 6); }

TensorPtr abs_scalar(Graph& g, const TensorPtr& x) {
    check(x->numel() == 1, "abs_scalar: expects a scalar");
    auto out = scalar(std::abs(x->data[0]));
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out](Graph& g) {
            const real_t s = x->data[0] > 0 ? 1 : (x->data[0] < 0 ? -1 : 0);
            g.cot(x)[0] += s * g.cot(out)[0];
        });
    }
    return out;
}

TensorPtr weighted_sum(Graph& g, const std::vector<TensorPtr>& xs,
                       const TensorPtr& w) {
    check(!xs.empty(), "weighted_sum: no inputs");
    check(w->numel() == static_cast<i64>(xs.size()),
          "weighted_sum: weight length must equal input count");
    for (const auto& x : xs)
        check(same_shape(*x, *xs[0]), "weighted_sum: input shape mismatch");
    auto out = make_tensor(xs[0]->shape);
    const size_t n = out->data.size();
    for (size_t i = 0; i < xs.size(); ++i)
        kern::ops().axpy(w->data[i], xs[i]->data.data(), out->data.data(), n);
    std::vector<TensorPtr> inputs = xs;
    inputs.push_back(w);
    bool needs = g.recording() && w->requires_grad;
    for (const auto& x : xs) needs = needs || (g.recording() && x->requires_grad);
    if (needs) {
        out->requires_grad = true;
        out->grad_leaf = false;
        auto xs_copy = xs;
        g.record(std::move(inputs), out, [xs_copy, w, out](Graph& g) {
            const auto& go = g.cot(out);
            const size_t n = go.size();
            for (size_t i = 0; i < xs_copy.size(); ++i) {
                if (xs_copy[i]->requires_grad)
                    kern::ops().axpy(w->data[i], go.data(),
                                     g.cot(xs_copy[i]).data(), n);
                if (w->requires_grad)
                    g.cot(w)[i] +=
                        kern::ops().dot(xs_copy[i]->data.data(), go.data(), n);
            }
        });
    }
    return out;
}

TensorPtr dot_const(Graph& g, const TensorPtr& x, std::vector<real_t> coef) {
    check(x->numel() == static_cast<i64>(coef.size()),
          "dot_const: coefficient length mismatch");
    auto out =
        scalar(kern::ops().dot(x->data.data(), coef.data(), coef.size()));
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out, coef = std::move(coef)](Graph& g) {
            const real_t go = g.cot(out)[0];
            kern::ops().axpy(go, coef.data(), g.cot(x).data(), coef.size());
        });
    }
    return out;
}

TensorPtr softmax(Graph& g, const TensorPtr& x) {
    check(x->shape.size() == 1, "softmax: expects a 1-D tensor");
    auto out = make_tensor(x->shape);
    const real_t mx = *std::max_element(x->data.begin(), x->data.end());
    real_t denom = 0;
    for (size_t i = 0; i < x->data.size(); ++i) {
        out->data[i] = std::exp(x->data[i] - mx);
        denom += out->data[i];
    }
    for (auto& v : out->data) v /= denom;
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out](Graph& g) {
            const auto& go = g.cot(out);
            auto& gx = g.cot(x);
            const real_t dot =
                kern::ops().dot(out->data.data(), go.data(), go.size());
            for (size_t i = 0; i < go.size(); ++i)
                gx[i] += out->data[i] * (go[i] - dot);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)

namespace {

struct ConvDims {
    i64 n, cin, h, w;
    i64 cout, cg, kh, kw;  // cg = cin/groups
    i64 ho, wo;
    int stride, pad, groups;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad,
                   int groups) {
    check(x.shape.size() == 4, "conv2d: input must be NCHW, got " +
                                   shape_str(x.shape));
    check(w.shape.size() == 4, "conv2d: weight must be OIHW, got " +
                                   shape_str(w.shape));
    check(stride >= 1 && pad >= 0 && groups >= 1, "conv2d: bad attributes");
    ConvDims d;
    d.n = x.shape[0];
    d.cin = x.shape[1];
    d.h = x.shape[2];
    d.w = x.shape[3];
    d.cout = w.shape[0];
    d.cg = w.shape[1];
    d.kh = w.shape[2];
    d.kw = w.shape[3];
    d.stride = stride;
    d.pad = pad;
    d.groups = groups;
    check(d.cin % groups == 0 && d.cout % groups == 0,
          "conv2d: channel counts must be divisible by groups");
    check(d.cg == d.cin / groups,
          "conv2d: weight input channels " + std::to_string(d.cg) +
              " do not match input channels/groups " +
              std::to_string(d.cin / groups));
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    check(d.ho >= 1 && d.wo >= 1 && d.h + 2 * pad >= d.kh &&
              d.w + 2 * pad >= d.kw,
          "conv2d: spatial dims invalid after padding/stride");
    return d;
}

// cols: [cg*kh*kw, ho*wo] for one sample and group, row-major.
void im2col(const real_t* x, const ConvDims& d, i64 group, real_t* cols) {
    const i64 hw = d.ho * d.wo;
    for (i64 c = 0; c < d.cg; ++c) {
        const real_t* xc = x + (group * d.cg + c) * d.h * d.w;
        for (i64 ki = 0; ki < d.kh; ++ki) {
            for (i64 kj = 0; kj < d.kw; ++kj) {
                real_t* row = cols + ((c * d.kh + ki) * d.kw + kj) * hw;
                for (i64 oh = 0; oh < d.ho; ++oh) {
                    const i64 ih = oh * d.stride - d.pad + ki;
                    real_t* out = row + oh * d.wo;
                    if (ih < 0 || ih >= d.h) {
                        std::memset(out, 0, sizeof(real_t) * d.wo);
                        continue;
                    }
                    const real_t* xin = xc + ih * d.w;
                    for (i64 ow = 0; ow < d.wo; ++ow) {
                        const i64 iw = ow * d.stride - d.pad + kj;
                        out[ow] = (iw < 0 || iw >= d.w) ? real_t(0) : xin[iw];
                    }
                }
            }
        }
    }
}

void col2im_add(const real_t* cols, const ConvDims& d, i64 group, real_t* gx) {
    const i64 hw = d.ho * d.wo;
    for (i64 c = 0; c < d.cg; ++c) {
        real_t* xc = gx + (group * d.cg + c) * d.h * d.w;
        for (i64 ki = 0; ki < d.kh; ++ki) {
            for (i64 kj = 0; kj < d.kw; ++kj) {
                const real_t* row = cols + ((c * d.kh + ki) * d.kw + kj) * hw;
                for (i64 oh = 0; oh < d.ho; ++oh) {
                    const i64 ih = oh * d.stride - d.pad + ki;
                    if (ih < 0 || ih >= d.h) continue;
                    const real_t* in = row + oh * d.wo;
                    real_t* xout = xc + ih * d.w;
                    for (i64 ow = 0; ow < d.wo; ++ow) {
                        const i64 iw = ow * d.stride - d.pad + kj;
                        if (iw >= 0 && iw < d.w) xout[iw] += in[ow];
                    }
                }
            }
        }
    }
}

// Depthwise (cg == 1, one output channel per group): per-channel stencil,
// stride-1 rows reduce to shifted axpy/dot over contiguous spans.
void depthwise_forward(const real_t* x, const real_t* w, real_t* out,
                       const ConvDims& d, i64 n, i64 c) {
    const real_t* xc = x + (n * d.cin + c) * d.h * d.w;
    const real_t* wc = w + c * d.kh * d.kw;
    real_t* oc = out + (n * d.cout + c) * d.ho * d.wo;
    for (i64 ki = 0; ki < d.kh; ++ki) {
        for (i64 kj = 0; kj < d.kw; ++kj) {
            const real_t wv = wc[ki * d.kw + kj];
            for (i64 oh = 0; oh < d.ho; ++oh) {
                const i64 ih = oh * d.stride - d.pad + ki;
                if (ih < 0 || ih >= d.h) continue;
                if (d.stride == 1) {
                    const i64 lo = std::max<i64>(0, d.pad - kj);
                    const i64 hi = std::min<i64>(d.wo, d.w + d.pad - kj);
                    if (lo >= hi) continue;
                    kern::ops().axpy(wv, xc + ih * d.w + lo - d.pad + kj,
                                     oc + oh * d.wo + lo,
                                     static_cast<size_t>(hi - lo));
                } else {
                    real_t* orow = oc + oh * d.wo;
                    const real_t* xrow = xc + ih * d.w;
                    for (i64 ow = 0; ow < d.wo; ++ow) {
                        const i64 iw = ow * d.stride - d.pad + kj;
                        if (iw >= 0 && iw < d.w) orow[ow] += wv * xrow[iw];
                    }
                }
            }
        }
    }
}

void depthwise_backward(const real_t* x, const real_t* w, const real_t* gout,
                        real_t* gx, real_t* gw, const ConvDims& d, i64 n,
                        i64 c) {
    const real_t* xc = x + (n * d.cin + c) * d.h * d.w;
    const real_t* wc = w + c * d.kh * d.kw;
    const real_t* goc = gout + (n * d.cout + c) * d.ho * d.wo;
    real_t* gxc = gx ? gx + (n * d.cin + c) * d.h * d.w : nullptr;
    real_t* gwc = gw ? gw + c * d.kh * d.kw : nullptr;
    for (i64 ki = 0; ki < d.kh; ++ki) {
        for (i64 kj = 0; kj < d.kw; ++kj) {
            const real_t wv = wc[ki * d.kw + kj];
            real_t acc = 0;
            for (i64 oh = 0; oh < d.ho; ++oh) {
                const i64 ih = oh * d.stride - d.pad + ki;
                if (ih < 0 || ih >= d.h) continue;
                if (d.stride == 1) {
                    const i64 lo = std::max<i64>(0, d.pad - kj);
                    const i64 hi = std::min<i64>(d.wo, d.w + d.pad - kj);
                    if (lo >= hi) continue;
                    const size_t len = static_cast<size_t>(hi - lo);
                    if (gxc)
                        kern::ops().axpy(wv, goc + oh * d.wo + lo,
                                         gxc + ih * d.w + lo - d.pad + kj,
                                         len);
                    if (gwc)
                        acc += kern::ops().dot(goc + oh * d.wo + lo,
                                               xc + ih * d.w + lo - d.pad + kj,
                                               len);
                } else {
                    const real_t* gorow = goc + oh * d.wo;
                    const real_t* xrow = xc + ih * d.w;
                    real_t* gxrow = gxc ? gxc + ih * d.w : nullptr;
                    for (i64 ow = 0; ow < d.wo; ++ow) {
                        const i64 iw = ow * d.stride - d.pad + kj;
                        if (iw < 0 || iw >= d.w) continue;
                        if (gxrow) gxrow[iw] += wv * gorow[ow];
                        if (gwc) acc += gorow[ow] * xrow[iw];
                    }
                }
            }
            if (gwc) gwc[ki * d.kw + kj] += acc;
        }
    }
}

}  // namespace

TensorPtr conv2d(Graph& g, const TensorPtr& x, const TensorPtr& w, int stride,
                 int padding, int groups) {
    const ConvDims d = conv_dims(*x, *w, stride, padding, groups);
    auto out = make_tensor({d.n, d.cout, d.ho, d.wo});
    const i64 k = d.cg * d.kh * d.kw;
    const i64 hw = d.ho * d.wo;
    const i64 og = d.cout / d.groups;  // output channels per group
    // Pointwise stride-1 convolutions map straight onto GEMM: the group's
    // input slice already is the column matrix.
    const bool pointwise =
        d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
    const bool depthwise = d.cg == 1 && og == 1;
    if (depthwise) {
        for (i64 n = 0; n < d.n; ++n)
            for (i64 c = 0; c < d.cin; ++c)
                depthwise_forward(x->data.data(), w->data.data(),
                                  out->data.data(), d, n, c);
    } else {
        std::vector<real_t> cols(pointwise ? 0 : static_cast<size_t>(k * hw));
        for (i64 n = 0; n < d.n; ++n) {
            const real_t* xn = x->data.data() + n * d.cin * d.h * d.w;
            real_t* on = out->data.data() + n * d.cout * hw;
            for (int grp = 0; grp < d.groups; ++grp) {
                const real_t* col_ptr;
                if (pointwise) {
                    col_ptr = xn + grp * d.cg * hw;
                } else {
                    im2col(xn, d, grp, cols.data());
                    col_ptr = cols.data();
                }
                kern::ops().gemm(false, false, og, hw, k, 1,
                                 w->data.data() + grp * og * k, k, col_ptr,
                                 hw, 0, on + grp * og * hw, hw);
            }
        }
    }
    if (track(g, {&x, &w})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        if (depthwise) {
            g.record({x, w}, out, [x, w, out, d](Graph& g) {
                const auto& go = g.cot(out);
                real_t* gw = w->requires_grad ? g.cot(w).data() : nullptr;
                real_t* gx = x->requires_grad ? g.cot(x).data() : nullptr;
                if (!gw && !gx) return;
                for (i64 n = 0; n < d.n; ++n)
                    for (i64 c = 0; c < d.cin; ++c)
                        depthwise_backward(x->data.data(), w->data.data(),
                                           go.data(), gx, gw, d, n, c);
            });
            return out;
        }
        g.record({x, w}, out, [x, w, out, d, pointwise](Graph& g) {
            const auto& go = g.cot(out);
            const i64 k = d.cg * d.kh * d.kw;
            const i64 hw = d.ho * d.wo;
            const i64 og = d.cout / d.groups;
            std::vector<real_t> cols(pointwise ? 0
                                               : static_cast<size_t>(k * hw));
            std::vector<real_t> gcols;
            if (x->requires_grad && !pointwise)
                gcols.resize(static_cast<size_t>(k * hw));
            real_t* gw = w->requires_grad ? g.cot(w).data() : nullptr;
            real_t* gx = x->requires_grad ? g.cot(x).data() : nullptr;
            for (i64 n = 0; n < d.n; ++n) {
                const real_t* xn = x->data.data() + n * d.cin * d.h * d.w;
                const real_t* gon = go.data() + n * d.cout * hw;
                for (int grp = 0; grp < d.groups; ++grp) {
                    if (gw) {
                        const real_t* col_ptr;
                        if (pointwise) {
                            col_ptr = xn + grp * d.cg * hw;
                        } else {
                            im2col(xn, d, grp, cols.data());
                            col_ptr = cols.data();
                        }
                        kern::ops().gemm(false, true, og, k, hw, 1,
                                         gon + grp * og * hw, hw, col_ptr, hw,
                                         1, gw + grp * og * k, k);
                    }
                    if (gx) {
                        if (pointwise) {
                            kern::ops().gemm(
                                true, false, k, hw, og, 1,
                                w->data.data() + grp * og * k, k,
                                gon + grp * og * hw, hw, 1,
                                gx + n * d.cin * d.h * d.w + grp * d.cg * hw,
                                hw);
                        } else {
                            kern::ops().gemm(true, false, k, hw, og, 1,
                                             w->data.data() + grp * og * k, k,
                                             gon + grp * og * hw, hw, 0,
                                             gcols.data(), hw);
                            col2im_add(gcols.data(), d, grp,
                                       gx + n * d.cin * d.h * d.w);
                        }
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr linear(Graph& g, const TensorPtr& x, const TensorPtr& w,
                 const TensorPtr& bias) {
    check(x->shape.size() == 2, "linear: input must be [N, in]");
    check(w->shape.size() == 2, "linear: weight must be [out, in]");
    const i64 n = x->shape[0], in = x->shape[1], out_f = w->shape[0];
    check(w->shape[1] == in, "linear: in-feature mismatch, input " +
                                 shape_str(x->shape) + " weight " +
                                 shape_str(w->shape));
    if (bias) check(bias->numel() == out_f, "linear: bias size mismatch");
    auto out = make_tensor({n, out_f});
    kern::ops().gemm(false, true, n, out_f, in, 1, x->data.data(), in,
                     w->data.data(), in, 0, out->data.data(), out_f);
    if (bias)
        for (i64 i = 0; i < n; ++i)
            kern::ops().add(out->data.data() + i * out_f, bias->data.data(),
                            out->data.data() + i * out_f, out_f);
    if (track(g, {&x, &w, &bias})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        std::vector<TensorPtr> ins{x, w};
        if (bias) ins.push_back(bias);
        g.record(std::move(ins), out, [x, w, bias, out, n, in,
                                       out_f](Graph& g) {
            const auto& go = g.cot(out);
            if (x->requires_grad)
                kern::ops().gemm(false, false, n, in, out_f, 1, go.data(),
                                 out_f, w->data.data(), in, 1, g.cot(x).data(),
                                 in);
            if (w->requires_grad)
                kern::ops().gemm(true, false, out_f, in, n, 1, go.data(),
                                 out_f, x->data.data(), in, 1, g.cot(w).data(),
                                 in);
            if (bias && bias->requires_grad) {
                auto& gb = g.cot(bias);
                for (i64 i = 0; i < n; ++i)
                    kern::ops().add(gb.data(), go.data() + i * out_f,
                                    gb.data(), out_f);
            }
        });
    }
    return out;
}

TensorPtr batch_norm(Graph& g, const TensorPtr& x, const TensorPtr& gamma,
                     const TensorPtr& beta, BNState& state, real_t momentum,
                     real_t eps, bool training) {
    check(x->shape.size() == 4 || x->shape.size() == 2,
          "batch_norm: input must be [N,C,H,W] or [N,C]");
    check(momentum > 0 && momentum <= 1, "batch_norm: momentum must be in (0,1]");
    const i64 n = x->shape[0];
    const i64 c = x->shape[1];
    const i64 hw = x->shape.size() == 4 ? x->shape[2] * x->shape[3] : 1;
    check(gamma->numel() == c && beta->numel() == c &&
              state.running_mean->numel() == c &&
              state.running_var->numel() == c,
          "batch_norm: parameter/state size must equal channel count");
    const i64 count = n * hw;

    std::vector<real_t> mean_c(c), ivar_c(c);
    if (training) {
        check(count >= 2,
              "batch_norm: variance undefined for fewer than 2 elements per "
              "channel in training mode");
        for (i64 ch = 0; ch < c; ++ch) {
            real_t s = 0, sq = 0;
            for (i64 i = 0; i < n; ++i) {
                const real_t* p = x->data.data() + (i * c + ch) * hw;
                s += kern::ops().sum(p, hw);
                sq += kern::ops().dot(p, p, hw);
            }
            const real_t m = s / count;
            const real_t var = std::max<real_t>(sq / count - m * m, 0);
            mean_c[ch] = m;
            ivar_c[ch] = real_t(1) / std::sqrt(var + eps);
            const real_t unbiased = var * count / (count - 1);
            auto& rm = state.running_mean->data[ch];
            auto& rv = state.running_var->data[ch];
            rm = (1 - momentum) * rm + momentum * m;
            rv = (1 - momentum) * rv + momentum * unbiased;
        }
    } else {
        for (i64 ch = 0; ch < c; ++ch) {
            mean_c[ch] = state.running_mean->data[ch];
            ivar_c[ch] =
                real_t(1) / std::sqrt(state.running_var->data[ch] + eps);
        }
    }

    auto out = make_tensor(x->shape);
    for (i64 i = 0; i < n; ++i) {
        for (i64 ch = 0; ch < c; ++ch) {
            const real_t* p = x->data.data() + (i * c + ch) * hw;
            real_t* o = out->data.data() + (i * c + ch) * hw;
            const real_t a = gamma->data[ch] * ivar_c[ch];
            const real_t b = beta->data[ch] - a * mean_c[ch];
            for (i64 j = 0; j < hw; ++j) o[j] = a * p[j] + b;
        }
    }

    if (track(g, {&x, &gamma, &beta})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record(
            {x, gamma, beta}, out,
            [x, gamma, beta, out, mean_c = std::move(mean_c),
             ivar_c = std::move(ivar_c), n, c, hw, count, training](Graph& g) {
                const auto& go = g.cot(out);
                for (i64 ch = 0; ch < c; ++ch) {
                    const real_t m = mean_c[ch];
                    const real_t iv = ivar_c[ch];
                    // Channel reductions: sum(go) and sum(go * xhat), with
                    // sum(go * xhat) = iv * (dot(go, x) - m * sum(go)).
                    real_t sg = 0, sgx_dot = 0;
                    for (i64 i = 0; i < n; ++i) {
                        const i64 base = (i * c + ch) * hw;
                        const real_t* gp = go.data() + base;
                        const real_t* xp = x->data.data() + base;
                        sg += kern::ops().sum(gp, hw);
                        sgx_dot += kern::ops().dot(gp, xp, hw);
                    }
                    const real_t sgx = iv * (sgx_dot - m * sg);
                    if (gamma->requires_grad) g.cot(gamma)[ch] += sgx;
                    if (beta->requires_grad) g.cot(beta)[ch] += sg;
                    if (!x->requires_grad) continue;
                    auto& gx = g.cot(x);
                    const real_t gam = gamma->data[ch];
                    if (training) {
                        // gx += A*go + B*x + C elementwise, from expanding
                        // gam*iv*(go - sg/N - xhat*sgx/N).
                        const real_t invn = real_t(1) / count;
                        const real_t a = gam * iv;
                        const real_t b = -gam * iv * iv * invn * sgx;
                        const real_t cc =
                            -gam * iv * invn * sg + gam * iv * iv * invn * sgx * m;
                        for (i64 i = 0; i < n; ++i) {
                            const i64 base = (i * c + ch) * hw;
                            const real_t* gp = go.data() + base;
                            const real_t* xp = x->data.data() + base;
                            real_t* gxp = gx.data() + base;
                            for (i64 j = 0; j < hw; ++j)
                                gxp[j] += a * gp[j] + b * xp[j] + cc;
                        }
                    } else {
                        const real_t a = gam * iv;
                        for (i64 i = 0; i < n; ++i) {
                            const i64 base = (i * c + ch) * hw;
                            kern::ops().axpy(a, go.data() + base,
                                             gx.data() + base, hw);
                        }
                    }
                }
            });
    }
    return out;
}

TensorPtr global_avg_pool(Graph& g, const TensorPtr& x) {
    check(x->shape.size() == 4, "global_avg_pool: input must be NCHW");
    const i64 n = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
    auto out = make_tensor({n, c});
    const real_t inv = real_t(1) / static_cast<real_t>(hw);
    for (i64 i = 0; i < n * c; ++i)
        out->data[i] = kern::ops().sum(x->data.data() + i * hw, hw) * inv;
    if (track(g, {&x})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        g.record({x}, out, [x, out, n, c, hw, inv](Graph& g) {
            const auto& go = g.cot(out);
            auto& gx = g.cot(x);
            for (i64 i = 0; i < n * c; ++i) {
                const real_t v = go[i] * inv;
                real_t* p = gx.data() + i * hw;
                for (i64 j = 0; j < hw; ++j) p[j] += v;
            }
        });
    }
    return out;
}

TensorPtr softmax_cross_entropy(Graph& g, const TensorPtr& logits,
                                std::span<const int> labels) {
    check(logits->shape.size() == 2, "cross_entropy: logits must be [N, C]");
    const i64 n = logits->shape[0], c = logits->shape[1];
    check(static_cast<i64>(labels.size()) == n,
          "cross_entropy: label count mismatch");
    auto probs = std::make_shared<std::vector<real_t>>(logits->data);
    real_t loss = 0;
    for (i64 i = 0; i < n; ++i) {
        real_t* row = probs->data() + i * c;
        check(labels[i] >= 0 && labels[i] < c, "cross_entropy: label out of range");
        const real_t mx = *std::max_element(row, row + c);
        real_t denom = 0;
        for (i64 j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            denom += row[j];
        }
        for (i64 j = 0; j < c; ++j) row[j] /= denom;
        loss -= std::log(std::max(row[labels[i]],
                                  std::numeric_limits<real_t>::min()));
    }
    auto out = scalar(loss / n);
    if (track(g, {&logits})) {
        out->requires_grad = true;
        out->grad_leaf = false;
        std::vector<int> lab(labels.begin(), labels.end());
        g.record({logits}, out,
                 [logits, out, probs, lab = std::move(lab), n, c](Graph& g) {
                     const real_t go = g.cot(out)[0] / n;
                     auto& gl = g.cot(logits);
                     for (i64 i = 0; i < n; ++i) {
                         const real_t* p = probs->data() + i * c;
                         real_t* gp = gl.data() + i * c;
                         for (i64 j = 0; j < c; ++j) gp[j] += go * p[j];
                         gp[lab[i]] -= go;
                     }
                 });
    }
    return out;
}

TensorPtr apply_custom(Graph& g, std::vector<TensorPtr> inputs,
                       CustomForwardFn fwd, CustomBackwardFn bwd) {
    check(!inputs.empty(), "custom op: no inputs");
    Tensor result = fwd(inputs);
    check(shape_numel(result.shape) == static_cast<i64>(result.data.size()),
          "custom op: forward output data does not match its shape");
    auto out = from_data(std::move(result.shape), std::move(result.data));
    bool needs = false;
    if (g.recording())
        for (const auto& in : inputs) needs = needs || in->requires_grad;
    if (needs) {
        out->requires_grad = true;
        out->grad_leaf = false;
        auto ins = inputs;
        g.record(std::move(inputs), out,
                 [ins = std::move(ins), out, bwd = std::move(bwd)](Graph& g) {
                     const auto& go = g.cot(out);
                     auto cots = bwd(ins, *out, go);
                     check(cots.size() == ins.size(),
                           "custom op: backward must return one cotangent per "
                           "input");
                     for (size_t i = 0; i < ins.size(); ++i) {
                         if (cots[i].empty()) continue;
                         check(cots[i].size() == ins[i]->data.size(),
                               "custom op: cotangent shape mismatch for input " +
                                   std::to_string(i));
                         if (ins[i]->requires_grad)
                             kern::ops().axpy(1, cots[i].data(),
                                              g.cot(ins[i]).data(),
                                              cots[i].size());
                     }
                 });
    }
    return out;
}

}  // namespace ops
}  // namespace bitmix
