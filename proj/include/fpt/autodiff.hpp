#ifndef FPT_AUTODIFF_HPP
#define FPT_AUTODIFF_HPP

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "fpt/graph.hpp"

namespace fpt {

// ---------------------------------------------------------------------------
// Gradient containers
// ---------------------------------------------------------------------------

template <class T>
struct NodeGrads {
    Tensor<T> dw;
    std::vector<T> dbias;
    std::vector<std::vector<T>> dgamma, dbeta; // per pipeline stage (empty unless BatchNorm)
    Tensor<T> dproj;
    std::vector<T> dproj_bias;
};

/// One gradient tensor per trainable parameter tensor, shapes matching exactly.
/// Running statistics are not trainable and carry no gradient.
template <class T>
struct GradientSet {
    std::vector<NodeGrads<T>> nodes;
    Tensor<T> dhead_w;
    std::vector<T> dhead_bias;
};

template <class T>
GradientSet<T> make_zero_grads(const NetworkGraph<T>& net) {
    GradientSet<T> g;
    g.nodes.resize(net.nodes.size());
    for (std::size_t i = 0; i < net.nodes.size(); ++i) {
        const auto& node = net.nodes[i];
        auto& ng = g.nodes[i];
        ng.dw = Tensor<T>(node.conv.w.w.shape);
        ng.dbias.assign(node.conv.bias.size(), T(0));
        ng.dgamma.resize(node.conv.sigma.size());
        ng.dbeta.resize(node.conv.sigma.size());
        for (std::size_t s = 0; s < node.conv.sigma.size(); ++s) {
            if (node.conv.sigma[s].kind == StageKind::BatchNorm) {
                ng.dgamma[s].assign(node.conv.sigma[s].gamma.size(), T(0));
                ng.dbeta[s].assign(node.conv.sigma[s].beta.size(), T(0));
            }
        }
        if (node.shortcut_in && node.shortcut_in->kind == ShortcutKind::Projection) {
            ng.dproj = Tensor<T>(node.shortcut_in->proj.w.shape);
            ng.dproj_bias.assign(node.shortcut_in->proj_bias.size(), T(0));
        }
    }
    g.dhead_w = Tensor<T>(net.head.fc.w.w.shape);
    g.dhead_bias.assign(net.head.fc.bias.size(), T(0));
    return g;
}

namespace detail {

template <class Net, class Fn>
void walk_params(Net& net, Fn&& fn) {
    for (auto& node : net.nodes) {
        for (auto& v : node.conv.w.w.data) fn(v);
        for (auto& v : node.conv.bias) fn(v);
        for (auto& st : node.conv.sigma) {
            if (st.kind == StageKind::BatchNorm) {
                for (auto& v : st.gamma) fn(v);
                for (auto& v : st.beta) fn(v);
            }
        }
        if (node.shortcut_in && node.shortcut_in->kind == ShortcutKind::Projection) {
            for (auto& v : node.shortcut_in->proj.w.data) fn(v);
            for (auto& v : node.shortcut_in->proj_bias) fn(v);
        }
    }
    for (auto& v : net.head.fc.w.w.data) fn(v);
    for (auto& v : net.head.fc.bias) fn(v);
}

template <class T, class GS, class Fn>
void walk_grads(GS& grads, Fn&& fn) {
    for (auto& ng : grads.nodes) {
        for (auto& v : ng.dw.data) fn(v);
        for (auto& v : ng.dbias) fn(v);
        for (std::size_t s = 0; s < ng.dgamma.size(); ++s) {
            for (auto& v : ng.dgamma[s]) fn(v);
            for (auto& v : ng.dbeta[s]) fn(v);
        }
        for (auto& v : ng.dproj.data) fn(v);
        for (auto& v : ng.dproj_bias) fn(v);
    }
    for (auto& v : grads.dhead_w.data) fn(v);
    for (auto& v : grads.dhead_bias) fn(v);
}

} // namespace detail

/// Pointers to every trainable parameter, in a canonical order shared with
/// collect_grads.
template <class T>
std::vector<T*> collect_params(NetworkGraph<T>& net) {
    std::vector<T*> out;
    detail::walk_params(net, [&](T& v) { out.push_back(&v); });
    return out;
}

template <class T>
std::vector<const T*> collect_params(const NetworkGraph<T>& net) {
    std::vector<const T*> out;
    detail::walk_params(net, [&](const T& v) { out.push_back(&v); });
    return out;
}

template <class T>
std::vector<T*> collect_grads(GradientSet<T>& grads) {
    std::vector<T*> out;
    detail::walk_grads<T>(grads, [&](T& v) { out.push_back(&v); });
    return out;
}

template <class T>
std::size_t param_count(const NetworkGraph<T>& net) {
    std::size_t n = 0;
    detail::walk_params(net, [&](const T&) { ++n; });
    return n;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch, computed from softmax probabilities.
template <class T>
T cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
    const int n = probs.extent(0), classes = probs.extent(1);
    if (static_cast<int>(labels.size()) != n)
        throw ShapeMismatch("label count does not match batch size");
    T loss = T(0);
    for (int b = 0; b < n; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        if (y < 0 || y >= classes) throw LabelOutOfRange("label outside [0, classes)");
        loss += -std::log(probs(b, y));
    }
    loss /= static_cast<T>(n);
    if (!std::isfinite(loss)) throw NonFiniteLoss("loss is not finite");
    return loss;
}

namespace detail {

template <class T>
void conv_backward_nchw(const Kernel4<T>& W, const Tensor<T>& x, const Tensor<T>& dy,
                        Tensor<T>& dw, std::vector<T>& dbias, Tensor<T>* dx) {
    const int n = x.extent(0), h = x.extent(2), w = x.extent(3);
    const int co = W.out_channels(), ci = W.in_channels(), kh = W.kh(), kw = W.kw();
    const int ho = dy.extent(2), wo = dy.extent(3);
    const int stride = W.stride, pad = W.padding;
    for (int b = 0; b < n; ++b)
        for (int o = 0; o < co; ++o)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    const T g = dy(b, o, oy, ox);
                    if (g == T(0)) continue;
                    dbias[static_cast<std::size_t>(o)] += g;
                    for (int m = 0; m < ci; ++m)
                        for (int r = 0; r < kh; ++r) {
                            const int iy = oy * stride - pad + r;
                            if (iy < 0 || iy >= h) continue;
                            for (int c = 0; c < kw; ++c) {
                                const int ix = ox * stride - pad + c;
                                if (ix < 0 || ix >= w) continue;
                                dw(o, m, r, c) += g * x(b, m, iy, ix);
                                if (dx) (*dx)(b, m, iy, ix) += g * W.w(o, m, r, c);
                            }
                        }
                }
}

template <class T>
Tensor<T> stage_backward(const Stage<T>& st, const StageTrace<T>& trace, const Tensor<T>& dy,
                         std::vector<T>* dgamma, std::vector<T>* dbeta) {
    const Tensor<T>& x = trace.in;
    switch (st.kind) {
        case StageKind::Identity:
            return dy;
        case StageKind::ReLU: {
            Tensor<T> dx = dy;
            for (std::size_t i = 0; i < dx.data.size(); ++i) {
                const T v = x.data[i];
                if (v < T(0))
                    dx.data[i] = T(0);
                else if (v == T(0))
                    dx.data[i] *= st.relu_subgrad_at_zero;
            }
            return dx;
        }
        case StageKind::BatchNorm: {
            const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
            Tensor<T> dx(x.shape);
            const T count = static_cast<T>(static_cast<long long>(n) * h * w);
            for (int ch = 0; ch < c; ++ch) {
                const T g = st.gamma[static_cast<std::size_t>(ch)];
                const T mu = trace.mean[static_cast<std::size_t>(ch)];
                const T v2 = trace.var[static_cast<std::size_t>(ch)];
                const T inv = T(1) / std::sqrt(v2 + st.bn_epsilon);
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (int b = 0; b < n; ++b)
                    for (int yy = 0; yy < h; ++yy)
                        for (int xx = 0; xx < w; ++xx) {
                            const T d = dy(b, ch, yy, xx);
                            sum_dy += d;
                            sum_dy_xhat += d * trace.xhat(b, ch, yy, xx);
                        }
                if (dgamma) (*dgamma)[static_cast<std::size_t>(ch)] += sum_dy_xhat;
                if (dbeta) (*dbeta)[static_cast<std::size_t>(ch)] += sum_dy;
                if (st.bn_train) {
                    // d/dx of gamma*(x-mu)/sqrt(var+eps) with batch statistics
                    for (int b = 0; b < n; ++b)
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < w; ++xx) {
                                const T xh = trace.xhat(b, ch, yy, xx);
                                const T d = dy(b, ch, yy, xx);
                                dx(b, ch, yy, xx) =
                                    g * inv *
                                    (d - sum_dy / count - xh * sum_dy_xhat / count);
                            }
                } else {
                    const T scale = g * inv;
                    for (int b = 0; b < n; ++b)
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < w; ++xx)
                                dx(b, ch, yy, xx) = dy(b, ch, yy, xx) * scale;
                }
                (void)mu;
            }
            return dx;
        }
        case StageKind::MaxPool: {
            Tensor<T> dx(x.shape);
            const int n = dy.extent(0), c = dy.extent(1), ho = dy.extent(2), wo = dy.extent(3);
            const int w = x.extent(3);
            std::size_t p = 0;
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox, ++p) {
                            const int flat = trace.argmax[p];
                            dx(b, ch, flat / w, flat % w) += dy.data[p];
                        }
            return dx;
        }
        case StageKind::AvgPool: {
            Tensor<T> dx(x.shape);
            const int n = dy.extent(0), c = dy.extent(1), ho = dy.extent(2), wo = dy.extent(3);
            const int h = x.extent(2), w = x.extent(3);
            const T denom = static_cast<T>(st.pool_k) * static_cast<T>(st.pool_k);
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox) {
                            const T g = dy(b, ch, oy, ox) / denom;
                            for (int r = 0; r < st.pool_k; ++r) {
                                const int iy = oy * st.pool_stride - st.pool_pad + r;
                                if (iy < 0 || iy >= h) continue;
                                for (int cc = 0; cc < st.pool_k; ++cc) {
                                    const int ix = ox * st.pool_stride - st.pool_pad + cc;
                                    if (ix < 0 || ix >= w) continue;
                                    dx(b, ch, iy, ix) += g;
                                }
                            }
                        }
            return dx;
        }
    }
    throw ShapeMismatch("unknown stage kind");
}

} // namespace detail

template <class T>
struct BackwardResult {
    T loss = T(0);
    Tensor<T> logits; // (N, classes), from the forward pass
    GradientSet<T> grads;
};

/// Exact reverse-mode gradients of mean cross-entropy over the batch with
/// respect to every trainable parameter. Fold signs propagate into shortcut
/// gradients. May update BatchNorm running statistics when requested via opts.
template <class T>
BackwardResult<T> backward(NetworkGraph<T>& net, const Tensor<T>& batch,
                           const std::vector<int>& labels, const ForwardOptions& opts = {}) {
    ForwardTrace<T> trace;
    forward(net, batch, opts, &trace);

    BackwardResult<T> res;
    res.loss = cross_entropy(trace.probs, labels);
    res.logits = trace.logits;
    res.grads = make_zero_grads(net);
    auto& grads = res.grads;

    const int n = batch.extent(0);
    const int classes = net.num_classes();

    // dL/dlogits for mean cross-entropy with softmax
    Tensor<T> dlogits({n, classes});
    for (int b = 0; b < n; ++b)
        for (int c = 0; c < classes; ++c) {
            const T onehot = labels[static_cast<std::size_t>(b)] == c ? T(1) : T(0);
            dlogits(b, c) = (trace.probs(b, c) - onehot) / static_cast<T>(n);
        }

    // head fc (1x1 conv on pooled input)
    Tensor<T> dpre({n, classes, 1, 1});
    for (int b = 0; b < n; ++b)
        for (int c = 0; c < classes; ++c) dpre(b, c, 0, 0) = dlogits(b, c);
    Tensor<T> dpooled(trace.pooled.shape);
    detail::conv_backward_nchw(net.head.fc.w, trace.pooled, dpre, grads.dhead_w,
                               grads.dhead_bias, &dpooled);

    // global average pool
    const Tensor<T>& last = trace.nodes.back().out;
    const int lh = last.extent(2), lw = last.extent(3);
    const T pool_denom = static_cast<T>(static_cast<long long>(lh) * lw);
    std::vector<Tensor<T>> dout(net.nodes.size());
    for (std::size_t i = 0; i < net.nodes.size(); ++i) dout[i] = Tensor<T>(trace.nodes[i].out.shape);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < last.extent(1); ++ch) {
            const T g = dpooled(b, ch, 0, 0) / pool_denom;
            for (int yy = 0; yy < lh; ++yy)
                for (int xx = 0; xx < lw; ++xx) dout.back()(b, ch, yy, xx) += g;
        }

    for (int i = static_cast<int>(net.nodes.size()) - 1; i >= 0; --i) {
        const auto& node = net.nodes[static_cast<std::size_t>(i)];
        const auto& nt = trace.nodes[static_cast<std::size_t>(i)];
        auto& ng = grads.nodes[static_cast<std::size_t>(i)];
        Tensor<T>& dy = dout[static_cast<std::size_t>(i)];

        // shortcut branch: node output = f_out + shortcut_out
        if (node.shortcut_in) {
            const auto& sc = *node.shortcut_in;
            const std::size_t src = static_cast<std::size_t>(sc.src_node);
            Tensor<T> draw;
            if (sc.has_fold()) {
                draw = Tensor<T>(nt.shortcut_raw.shape);
                const int h = dy.extent(2), w = dy.extent(3);
                for (int b = 0; b < n; ++b)
                    for (std::size_t c = 0; c < sc.fold.size(); ++c)
                        for (const auto& e : sc.fold[c])
                            for (int yy = 0; yy < h; ++yy)
                                for (int xx = 0; xx < w; ++xx) {
                                    const T g = dy(b, static_cast<int>(c), yy, xx);
                                    draw(b, e.src, yy, xx) += e.sign >= 0 ? g : -g;
                                }
            } else {
                draw = dy;
            }
            switch (sc.kind) {
                case ShortcutKind::Identity: {
                    auto& ds = dout[src];
                    for (std::size_t k = 0; k < ds.data.size(); ++k) ds.data[k] += draw.data[k];
                    break;
                }
                case ShortcutKind::ZeroPad: {
                    auto& ds = dout[src];
                    const int sc_c = ds.extent(1);
                    for (int b = 0; b < n; ++b)
                        for (int ch = 0; ch < sc_c; ++ch)
                            for (int yy = 0; yy < ds.extent(2); ++yy)
                                for (int xx = 0; xx < ds.extent(3); ++xx)
                                    ds(b, ch, yy, xx) += draw(b, ch, yy, xx);
                    break;
                }
                case ShortcutKind::Projection: {
                    Tensor<T> dsrc(trace.nodes[src].out.shape);
                    detail::conv_backward_nchw(sc.proj, trace.nodes[src].out, draw, ng.dproj,
                                               ng.dproj_bias, &dsrc);
                    auto& ds = dout[src];
                    for (std::size_t k = 0; k < ds.data.size(); ++k) ds.data[k] += dsrc.data[k];
                    break;
                }
            }
        }

        // pipeline, reversed
        Tensor<T> cur = dy;
        for (int s = static_cast<int>(node.conv.sigma.size()) - 1; s >= 0; --s) {
            const auto& st = node.conv.sigma[static_cast<std::size_t>(s)];
            std::vector<T>* dg = st.kind == StageKind::BatchNorm
                                     ? &ng.dgamma[static_cast<std::size_t>(s)]
                                     : nullptr;
            std::vector<T>* db = st.kind == StageKind::BatchNorm
                                     ? &ng.dbeta[static_cast<std::size_t>(s)]
                                     : nullptr;
            cur = detail::stage_backward(st, nt.stages[static_cast<std::size_t>(s)], cur, dg, db);
        }

        // conv + bias
        const Tensor<T>& x_in = i == 0 ? trace.input : trace.nodes[static_cast<std::size_t>(i - 1)].out;
        Tensor<T>* dx = nullptr;
        Tensor<T> dx_store;
        if (i > 0) {
            dx_store = Tensor<T>(x_in.shape);
            dx = &dx_store;
        }
        detail::conv_backward_nchw(node.conv.w, x_in, cur, ng.dw, ng.dbias, dx);
        if (i > 0) {
            auto& dprev = dout[static_cast<std::size_t>(i - 1)];
            for (std::size_t k = 0; k < dprev.data.size(); ++k) dprev.data[k] += dx_store.data[k];
        }
    }

    return res;
}

/// Loss evaluation without gradient bookkeeping or state mutation.
template <class T>
T loss_value(const NetworkGraph<T>& net, const Tensor<T>& batch, const std::vector<int>& labels,
             const ForwardOptions& opts = {}) {
    ForwardOptions o = opts;
    o.update_running_stats = false;
    auto res = forward(net, batch, o);
    return cross_entropy(res.probs, labels);
}

/// Central finite difference of the loss with respect to one flat parameter,
/// (L(theta + step e) - L(theta - step e)) / (2 step). Intended for 64-bit runs.
template <class T>
T finite_diff_grad(const NetworkGraph<T>& net, const Tensor<T>& batch,
                   const std::vector<int>& labels, std::size_t param_index, T step,
                   const ForwardOptions& opts = {}) {
    NetworkGraph<T> copy = net;
    auto params = collect_params(copy);
    if (param_index >= params.size()) throw ConfigError("parameter index out of range");
    const T saved = *params[param_index];
    *params[param_index] = saved + step;
    const T up = loss_value(copy, batch, labels, opts);
    *params[param_index] = saved - step;
    const T down = loss_value(copy, batch, labels, opts);
    *params[param_index] = saved;
    return (up - down) / (T(2) * step);
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { SGD, Adam };

template <class T>
struct OptimizerState {
    OptimizerKind kind = OptimizerKind::SGD;
    T lr = T(0.1);
    T momentum = T(0);
    T beta1 = T(0.9), beta2 = T(0.999), adam_eps = T(1e-8);
    T weight_decay = T(0);
    long long step_count = 0;
    std::vector<T> m, v; // per-parameter moment buffers, aligned with collect_params

    static OptimizerState sgd(T lr, T momentum = T(0), T weight_decay = T(0)) {
        OptimizerState s;
        s.kind = OptimizerKind::SGD;
        s.lr = lr;
        s.momentum = momentum;
        s.weight_decay = weight_decay;
        return s;
    }

    static OptimizerState adam(T lr, T weight_decay = T(0), T beta1 = T(0.9), T beta2 = T(0.999),
                               T eps = T(1e-8)) {
        OptimizerState s;
        s.kind = OptimizerKind::Adam;
        s.lr = lr;
        s.weight_decay = weight_decay;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.adam_eps = eps;
        return s;
    }
};

/// In-place parameter update. Weight decay is loss-coupled L2: the decay term
/// is added to the gradient before the optimizer update.
template <class T>
void optimizer_step(OptimizerState<T>& state, NetworkGraph<T>& net, GradientSet<T>& grads) {
    auto params = collect_params(net);
    auto gptrs = collect_grads(grads);
    if (params.size() != gptrs.size())
        throw ShapeMismatch("gradient set does not match parameter set");
    if (state.m.empty()) {
        state.m.assign(params.size(), T(0));
        state.v.assign(params.size(), T(0));
        state.step_count = 0;
    }
    if (state.m.size() != params.size())
        throw ShapeMismatch("optimizer moment buffers do not match parameter count (reset after morphs)");
    for (const T* g : gptrs)
        if (!std::isfinite(*g)) throw NonFiniteGradient("gradient is not finite");

    if (state.kind == OptimizerKind::SGD) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const T g = *gptrs[i] + state.weight_decay * *params[i];
            if (state.momentum != T(0)) {
                state.m[i] = state.momentum * state.m[i] + g;
                *params[i] -= state.lr * state.m[i];
            } else {
                *params[i] -= state.lr * g;
            }
        }
    } else {
        ++state.step_count;
        const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step_count));
        const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step_count));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const T g = *gptrs[i] + state.weight_decay * *params[i];
            state.m[i] = state.beta1 * state.m[i] + (T(1) - state.beta1) * g;
            state.v[i] = state.beta2 * state.v[i] + (T(1) - state.beta2) * g * g;
            const T mhat = state.m[i] / bc1;
            const T vhat = state.v[i] / bc2;
            *params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.adam_eps);
        }
    }
}

/// Learning-rate schedule: base_lr multiplied by every drop factor whose epoch
/// is <= the current epoch. Drops must be sorted by epoch.
inline double lr_schedule(int epoch, double base_lr,
                          const std::vector<std::pair<int, double>>& drops) {
    double lr = base_lr;
    for (const auto& [e, f] : drops)
        if (e <= epoch) lr *= f;
    return lr;
}

} // namespace fpt

#endif
