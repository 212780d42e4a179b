#ifndef FPT_GRAPH_HPP
#define FPT_GRAPH_HPP

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fpt/tensor.hpp"

namespace fpt {

// ---------------------------------------------------------------------------
// Nonlinearity pipeline
// ---------------------------------------------------------------------------

enum class StageKind { Identity, ReLU, BatchNorm, MaxPool, AvgPool };

inline const char* stage_kind_name(StageKind k) {
    switch (k) {
        case StageKind::Identity: return "identity";
        case StageKind::ReLU: return "relu";
        case StageKind::BatchNorm: return "batchnorm";
        case StageKind::MaxPool: return "maxpool";
        case StageKind::AvgPool: return "avgpool";
    }
    return "?";
}

/// One stage of a nonlinearity pipeline. Every stage maps channel c of its
/// output from channel c of its input only, using that channel's parameters.
template <class T>
struct Stage {
    StageKind kind = StageKind::Identity;

    // ReLU
    T relu_subgrad_at_zero = T(1); // 0 or 1

    // BatchNorm (per-channel parameter vectors)
    std::vector<T> gamma, beta, running_mean, running_var;
    T bn_epsilon = T(1e-5);
    T bn_momentum = T(0.1);
    bool bn_train = true;

    // Pooling
    int pool_k = 0, pool_stride = 0, pool_pad = 0;

    static Stage identity() { return Stage{}; }

    static Stage relu(T subgrad_at_zero = T(1)) {
        Stage s;
        s.kind = StageKind::ReLU;
        s.relu_subgrad_at_zero = subgrad_at_zero;
        return s;
    }

    static Stage batchnorm(int channels) {
        Stage s;
        s.kind = StageKind::BatchNorm;
        s.gamma.assign(channels, T(1));
        s.beta.assign(channels, T(0));
        s.running_mean.assign(channels, T(0));
        s.running_var.assign(channels, T(1));
        return s;
    }

    static Stage maxpool(int k, int stride, int pad = 0) {
        Stage s;
        s.kind = StageKind::MaxPool;
        s.pool_k = k;
        s.pool_stride = stride;
        s.pool_pad = pad;
        return s;
    }

    static Stage avgpool(int k, int stride, int pad = 0) {
        Stage s;
        s.kind = StageKind::AvgPool;
        s.pool_k = k;
        s.pool_stride = stride;
        s.pool_pad = pad;
        return s;
    }
};

/// Conv layer: kernel, per-output-channel bias, then the nonlinearity pipeline.
template <class T>
struct ConvLayer {
    Kernel4<T> w;
    std::vector<T> bias;
    std::vector<Stage<T>> sigma;
};

// ---------------------------------------------------------------------------
// Shortcuts
// ---------------------------------------------------------------------------

enum class ShortcutKind { Identity, ZeroPad, Projection };

/// One signed source-channel contribution of a fold map.
struct FoldEntry {
    int src = 0;
    int sign = 1; // +1 or -1
};

/// Residual connection. The kind produces a raw volume from the source node's
/// output; if `fold` is non-empty it then remaps channels as
/// out[c] = sum over fold[c] of sign * raw[src]. Fold rows created by widening
/// carry matched +/- pairs over equal-valued channel groups.
template <class T>
struct Shortcut {
    ShortcutKind kind = ShortcutKind::Identity;
    int src_node = -1;
    int zeropad_channels = 0;         // ZeroPad target channel count
    Kernel4<T> proj;                  // Projection kernel
    std::vector<T> proj_bias;
    std::vector<std::vector<FoldEntry>> fold; // empty => no fold

    bool has_fold() const { return !fold.empty(); }
};

template <class T>
struct LayerNode {
    ConvLayer<T> conv;
    std::optional<Shortcut<T>> shortcut_in;
};

/// Classification head: global average pool, 1x1 conv as the fully-connected
/// layer, then softmax.
template <class T>
struct Head {
    ConvLayer<T> fc; // 1x1 kernel, empty sigma
};

struct Consumer {
    enum class Kind { Conv, Shortcut, Head };
    Kind kind = Kind::Conv;
    int node = -1; // consuming node index; -1 for the head

    bool operator==(const Consumer&) const = default;
};

template <class T>
struct NetworkGraph {
    std::array<int, 3> input_shape{3, 32, 32}; // (C, h, w)
    std::vector<LayerNode<T>> nodes;
    Head<T> head;
    std::vector<std::vector<Consumer>> consumers; // per node, readers of its output

    int num_classes() const { return head.fc.w.out_channels(); }

    void rebuild_consumers() {
        const int n = static_cast<int>(nodes.size());
        consumers.assign(static_cast<std::size_t>(n), {});
        for (int i = 0; i < n; ++i) {
            if (i + 1 < n)
                consumers[static_cast<std::size_t>(i)].push_back({Consumer::Kind::Conv, i + 1});
            if (i == n - 1)
                consumers[static_cast<std::size_t>(i)].push_back({Consumer::Kind::Head, -1});
        }
        for (int j = 0; j < n; ++j) {
            const auto& sc = nodes[static_cast<std::size_t>(j)].shortcut_in;
            if (sc && sc->src_node >= 0 && sc->src_node < n)
                consumers[static_cast<std::size_t>(sc->src_node)].push_back(
                    {Consumer::Kind::Shortcut, j});
        }
    }
};

template <class T>
void set_batchnorm_train(NetworkGraph<T>& net, bool train) {
    for (auto& node : net.nodes)
        for (auto& st : node.conv.sigma)
            if (st.kind == StageKind::BatchNorm) st.bn_train = train;
}

// ---------------------------------------------------------------------------
// Shape inference
// ---------------------------------------------------------------------------

struct VolShape {
    int c = 0, h = 0, w = 0;
    bool operator==(const VolShape&) const = default;
};

inline int pool_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

template <class T>
VolShape pipeline_out_shape(const std::vector<Stage<T>>& sigma, VolShape s) {
    for (const auto& st : sigma) {
        if (st.kind == StageKind::MaxPool || st.kind == StageKind::AvgPool) {
            s.h = pool_out_extent(s.h, st.pool_k, st.pool_stride, st.pool_pad);
            s.w = pool_out_extent(s.w, st.pool_k, st.pool_stride, st.pool_pad);
            if (s.h < 1 || s.w < 1) throw DegenerateOutput("pool output extent < 1");
        }
    }
    return s;
}

template <class T>
VolShape layer_out_shape(const ConvLayer<T>& layer, VolShape in) {
    if (in.c != layer.w.in_channels())
        throw ChannelMismatch("layer expects " + std::to_string(layer.w.in_channels()) +
                              " input channels, got " + std::to_string(in.c));
    VolShape s;
    s.c = layer.w.out_channels();
    s.h = conv_out_extent(in.h, layer.w.kh(), layer.w.stride, layer.w.padding);
    s.w = conv_out_extent(in.w, layer.w.kw(), layer.w.stride, layer.w.padding);
    if (s.h < 1 || s.w < 1) throw DegenerateOutput("conv output extent < 1");
    return pipeline_out_shape(layer.sigma, s);
}

template <class T>
VolShape shortcut_out_shape(const Shortcut<T>& sc, VolShape src) {
    VolShape s = src;
    switch (sc.kind) {
        case ShortcutKind::Identity:
            break;
        case ShortcutKind::ZeroPad:
            if (sc.zeropad_channels < src.c)
                throw ShapeMismatch("zero-pad shortcut narrows channels");
            s.c = sc.zeropad_channels;
            break;
        case ShortcutKind::Projection:
            if (src.c != sc.proj.in_channels())
                throw ChannelMismatch("projection shortcut channel mismatch");
            s.c = sc.proj.out_channels();
            s.h = conv_out_extent(src.h, sc.proj.kh(), sc.proj.stride, sc.proj.padding);
            s.w = conv_out_extent(src.w, sc.proj.kw(), sc.proj.stride, sc.proj.padding);
            if (s.h < 1 || s.w < 1) throw DegenerateOutput("projection output extent < 1");
            break;
    }
    if (sc.has_fold()) {
        for (const auto& row : sc.fold)
            for (const auto& e : row)
                if (e.src < 0 || e.src >= s.c)
                    throw ShapeMismatch("fold entry references channel out of range");
        s.c = static_cast<int>(sc.fold.size());
    }
    return s;
}

/// Output shape of every node, in order. Throws on any inconsistency.
template <class T>
std::vector<VolShape> infer_shapes(const NetworkGraph<T>& net) {
    std::vector<VolShape> out;
    out.reserve(net.nodes.size());
    VolShape cur{net.input_shape[0], net.input_shape[1], net.input_shape[2]};
    for (std::size_t i = 0; i < net.nodes.size(); ++i) {
        const auto& node = net.nodes[i];
        VolShape f = layer_out_shape(node.conv, cur);
        if (node.shortcut_in) {
            const auto& sc = *node.shortcut_in;
            if (sc.src_node < 0 || sc.src_node >= static_cast<int>(i))
                throw ShapeMismatch("shortcut source does not precede destination");
            VolShape s = shortcut_out_shape(sc, out[static_cast<std::size_t>(sc.src_node)]);
            if (!(s == f))
                throw ShapeMismatch("shortcut output shape disagrees with layer output at node " +
                                    std::to_string(i));
        }
        out.push_back(f);
        cur = f;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

struct ForwardOptions {
    SumMode sum = SumMode::Sequential;
    bool update_running_stats = false;
};

template <class T>
struct StageTrace {
    Tensor<T> in;
    std::vector<T> mean, var; // BatchNorm train-mode batch statistics
    Tensor<T> xhat;
    std::vector<int> argmax;  // MaxPool: flat h*w input index per output element
};

template <class T>
struct NodeTrace {
    Tensor<T> preact;            // conv + bias
    std::vector<StageTrace<T>> stages;
    Tensor<T> f_out;             // pipeline output
    Tensor<T> shortcut_raw;      // shortcut kind output before fold
    Tensor<T> out;               // f_out (+ shortcut)
};

template <class T>
struct ForwardTrace {
    Tensor<T> input;
    std::vector<NodeTrace<T>> nodes;
    Tensor<T> pooled; // head global average pool, (N, C, 1, 1)
    Tensor<T> logits; // (N, classes)
    Tensor<T> probs;  // (N, classes)
};

template <class T>
struct ForwardResult {
    Tensor<T> logits;
    Tensor<T> probs;
};

namespace detail {

template <class T>
Tensor<T> lift_batch(const Tensor<T>& x) {
    require_rank(x, 3, "volume");
    Tensor<T> b({1, x.extent(0), x.extent(1), x.extent(2)});
    b.data = x.data;
    return b;
}

template <class T>
Tensor<T> squeeze_batch(const Tensor<T>& b) {
    Tensor<T> v({b.extent(1), b.extent(2), b.extent(3)});
    v.data = b.data;
    return v;
}

/// Batched cross-correlation, same per-element accumulation order as conv2d.
template <class T>
Tensor<T> conv2d_nchw(const Kernel4<T>& W, const Tensor<T>& x, SumMode mode) {
    require_rank(x, 4, "conv batch input");
    if (x.extent(1) != W.in_channels())
        throw ChannelMismatch("conv batch input has " + std::to_string(x.extent(1)) +
                              " channels, kernel expects " + std::to_string(W.in_channels()));
    const int n = x.extent(0), h = x.extent(2), w = x.extent(3);
    const int ho = conv_out_extent(h, W.kh(), W.stride, W.padding);
    const int wo = conv_out_extent(w, W.kw(), W.stride, W.padding);
    if (ho < 1 || wo < 1) throw DegenerateOutput("conv output extent < 1");
    Tensor<T> out({n, W.out_channels(), ho, wo});
    const int ci = W.in_channels(), kh = W.kh(), kw = W.kw();
    const int stride = W.stride, pad = W.padding;
    std::vector<T> terms;
    for (int b = 0; b < n; ++b) {
        for (int o = 0; o < W.out_channels(); ++o) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    if (mode == SumMode::Sequential) {
                        T acc = T(0);
                        for (int m = 0; m < ci; ++m)
                            for (int r = 0; r < kh; ++r) {
                                const int iy = oy * stride - pad + r;
                                if (iy < 0 || iy >= h) continue;
                                for (int c = 0; c < kw; ++c) {
                                    const int ix = ox * stride - pad + c;
                                    if (ix < 0 || ix >= w) continue;
                                    acc += W.w(o, m, r, c) * x(b, m, iy, ix);
                                }
                            }
                        out(b, o, oy, ox) = acc;
                    } else {
                        terms.clear();
                        for (int m = 0; m < ci; ++m)
                            for (int r = 0; r < kh; ++r) {
                                const int iy = oy * stride - pad + r;
                                if (iy < 0 || iy >= h) continue;
                                for (int c = 0; c < kw; ++c) {
                                    const int ix = ox * stride - pad + c;
                                    if (ix < 0 || ix >= w) continue;
                                    terms.push_back(W.w(o, m, r, c) * x(b, m, iy, ix));
                                }
                            }
                        out(b, o, oy, ox) = canonical_sum(terms);
                    }
                }
            }
        }
    }
    return out;
}

template <class T>
void add_bias_inplace(Tensor<T>& x, const std::vector<T>& bias) {
    const int n = x.extent(0), c = x.extent(1);
    const std::size_t hw = static_cast<std::size_t>(x.extent(2)) * x.extent(3);
    if (static_cast<int>(bias.size()) != c)
        throw ShapeMismatch("bias length does not match channel count");
    std::size_t p = 0;
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const T bv = bias[static_cast<std::size_t>(ch)];
            for (std::size_t s = 0; s < hw; ++s) x.data[p++] += bv;
        }
}

/// Applies one pipeline stage to an (N,C,h,w) tensor. `mutable_stage` is only
/// needed for running-stat updates.
template <class T>
Tensor<T> stage_apply(const Stage<T>& st, const Tensor<T>& x, const ForwardOptions& opts,
                      Stage<T>* mutable_stage, StageTrace<T>* trace) {
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    if (trace) trace->in = x;
    switch (st.kind) {
        case StageKind::Identity:
            return x;
        case StageKind::ReLU: {
            Tensor<T> y = x;
            for (auto& v : y.data) v = v > T(0) ? v : T(0);
            return y;
        }
        case StageKind::BatchNorm: {
            if (static_cast<int>(st.gamma.size()) != c)
                throw ShapeMismatch("batchnorm parameter length does not match channels");
            Tensor<T> y({n, c, h, w});
            Tensor<T> xhat({n, c, h, w});
            std::vector<T> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
            const T count = static_cast<T>(static_cast<long long>(n) * h * w);
            for (int ch = 0; ch < c; ++ch) {
                T mu, v2;
                if (st.bn_train) {
                    T sum = T(0);
                    for (int b = 0; b < n; ++b)
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < w; ++xx) sum += x(b, ch, yy, xx);
                    mu = sum / count;
                    T sq = T(0);
                    for (int b = 0; b < n; ++b)
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < w; ++xx) {
                                const T d = x(b, ch, yy, xx) - mu;
                                sq += d * d;
                            }
                    v2 = sq / count;
                } else {
                    mu = st.running_mean[static_cast<std::size_t>(ch)];
                    v2 = st.running_var[static_cast<std::size_t>(ch)];
                }
                mean[static_cast<std::size_t>(ch)] = mu;
                var[static_cast<std::size_t>(ch)] = v2;
                const T inv = T(1) / std::sqrt(v2 + st.bn_epsilon);
                const T g = st.gamma[static_cast<std::size_t>(ch)];
                const T bt = st.beta[static_cast<std::size_t>(ch)];
                for (int b = 0; b < n; ++b)
                    for (int yy = 0; yy < h; ++yy)
                        for (int xx = 0; xx < w; ++xx) {
                            const T xh = (x(b, ch, yy, xx) - mu) * inv;
                            xhat(b, ch, yy, xx) = xh;
                            y(b, ch, yy, xx) = g * xh + bt;
                        }
            }
            if (st.bn_train && opts.update_running_stats && mutable_stage) {
                for (int ch = 0; ch < c; ++ch) {
                    auto& rm = mutable_stage->running_mean[static_cast<std::size_t>(ch)];
                    auto& rv = mutable_stage->running_var[static_cast<std::size_t>(ch)];
                    rm = (T(1) - st.bn_momentum) * rm + st.bn_momentum * mean[static_cast<std::size_t>(ch)];
                    rv = (T(1) - st.bn_momentum) * rv + st.bn_momentum * var[static_cast<std::size_t>(ch)];
                }
            }
            if (trace) {
                trace->mean = std::move(mean);
                trace->var = std::move(var);
                trace->xhat = std::move(xhat);
            }
            return y;
        }
        case StageKind::MaxPool: {
            const int ho = pool_out_extent(h, st.pool_k, st.pool_stride, st.pool_pad);
            const int wo = pool_out_extent(w, st.pool_k, st.pool_stride, st.pool_pad);
            if (ho < 1 || wo < 1) throw DegenerateOutput("max pool output extent < 1");
            Tensor<T> y({n, c, ho, wo});
            std::vector<int> argmax;
            if (trace) argmax.assign(y.numel(), -1);
            std::size_t p = 0;
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox, ++p) {
                            T best = T(0);
                            int best_idx = -1;
                            for (int r = 0; r < st.pool_k; ++r) {
                                const int iy = oy * st.pool_stride - st.pool_pad + r;
                                if (iy < 0 || iy >= h) continue;
                                for (int cc = 0; cc < st.pool_k; ++cc) {
                                    const int ix = ox * st.pool_stride - st.pool_pad + cc;
                                    if (ix < 0 || ix >= w) continue;
                                    const T v = x(b, ch, iy, ix);
                                    // first maximal element under ascending scan
                                    if (best_idx < 0 || v > best) {
                                        best = v;
                                        best_idx = iy * w + ix;
                                    }
                                }
                            }
                            if (best_idx < 0)
                                throw DegenerateOutput("max pool window contains no input cell");
                            y.data[p] = best;
                            if (trace) argmax[p] = best_idx;
                        }
            if (trace) trace->argmax = std::move(argmax);
            return y;
        }
        case StageKind::AvgPool: {
            const int ho = pool_out_extent(h, st.pool_k, st.pool_stride, st.pool_pad);
            const int wo = pool_out_extent(w, st.pool_k, st.pool_stride, st.pool_pad);
            if (ho < 1 || wo < 1) throw DegenerateOutput("avg pool output extent < 1");
            Tensor<T> y({n, c, ho, wo});
            const T denom = static_cast<T>(st.pool_k) * static_cast<T>(st.pool_k);
            std::size_t p = 0;
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox, ++p) {
                            T sum = T(0);
                            for (int r = 0; r < st.pool_k; ++r) {
                                const int iy = oy * st.pool_stride - st.pool_pad + r;
                                if (iy < 0 || iy >= h) continue;
                                for (int cc = 0; cc < st.pool_k; ++cc) {
                                    const int ix = ox * st.pool_stride - st.pool_pad + cc;
                                    if (ix < 0 || ix >= w) continue;
                                    sum += x(b, ch, iy, ix);
                                }
                            }
                            y.data[p] = sum / denom;
                        }
            return y;
        }
    }
    throw ShapeMismatch("unknown stage kind");
}

template <class T>
Tensor<T> fold_apply(const std::vector<std::vector<FoldEntry>>& fold, const Tensor<T>& x,
                     SumMode mode) {
    const int n = x.extent(0), src_c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor<T> y({n, static_cast<int>(fold.size()), h, w});
    std::vector<T> terms;
    for (int b = 0; b < n; ++b)
        for (std::size_t c = 0; c < fold.size(); ++c)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    if (mode == SumMode::Sequential) {
                        T acc = T(0);
                        for (const auto& e : fold[c]) {
                            if (e.src < 0 || e.src >= src_c)
                                throw ShapeMismatch("fold entry out of range");
                            const T v = x(b, e.src, yy, xx);
                            acc += e.sign >= 0 ? v : -v;
                        }
                        y(b, static_cast<int>(c), yy, xx) = acc;
                    } else {
                        terms.clear();
                        for (const auto& e : fold[c]) {
                            if (e.src < 0 || e.src >= src_c)
                                throw ShapeMismatch("fold entry out of range");
                            const T v = x(b, e.src, yy, xx);
                            terms.push_back(e.sign >= 0 ? v : -v);
                        }
                        y(b, static_cast<int>(c), yy, xx) = canonical_sum(terms);
                    }
                }
    return y;
}

template <class T>
Tensor<T> shortcut_apply_nchw(const Shortcut<T>& sc, const Tensor<T>& x, const ForwardOptions& opts,
                              Tensor<T>* raw_out) {
    Tensor<T> raw;
    switch (sc.kind) {
        case ShortcutKind::Identity:
            raw = x;
            break;
        case ShortcutKind::ZeroPad: {
            if (sc.zeropad_channels < x.extent(1))
                throw ShapeMismatch("zero-pad shortcut narrows channels");
            raw = Tensor<T>({x.extent(0), sc.zeropad_channels, x.extent(2), x.extent(3)});
            for (int b = 0; b < x.extent(0); ++b)
                for (int c = 0; c < x.extent(1); ++c)
                    for (int yy = 0; yy < x.extent(2); ++yy)
                        for (int xx = 0; xx < x.extent(3); ++xx)
                            raw(b, c, yy, xx) = x(b, c, yy, xx);
            break;
        }
        case ShortcutKind::Projection: {
            raw = conv2d_nchw(sc.proj, x, opts.sum);
            add_bias_inplace(raw, sc.proj_bias);
            break;
        }
        default:
            throw UnsupportedShortcutKind("unknown shortcut kind");
    }
    if (raw_out) *raw_out = raw;
    if (!sc.has_fold()) return raw;
    return fold_apply(sc.fold, raw, opts.sum);
}

template <class T>
Tensor<T> layer_forward_nchw(const ConvLayer<T>& layer, const Tensor<T>& x,
                             const ForwardOptions& opts, ConvLayer<T>* mutable_layer,
                             NodeTrace<T>* trace) {
    Tensor<T> cur = conv2d_nchw(layer.w, x, opts.sum);
    add_bias_inplace(cur, layer.bias);
    if (trace) {
        trace->preact = cur;
        trace->stages.resize(layer.sigma.size());
    }
    for (std::size_t i = 0; i < layer.sigma.size(); ++i) {
        Stage<T>* mut = mutable_layer ? &mutable_layer->sigma[i] : nullptr;
        cur = stage_apply(layer.sigma[i], cur, opts, mut, trace ? &trace->stages[i] : nullptr);
    }
    if (trace) trace->f_out = cur;
    return cur;
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor<T> y({n, c, 1, 1});
    const T denom = static_cast<T>(static_cast<long long>(h) * w);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            T sum = T(0);
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) sum += x(b, ch, yy, xx);
            y(b, ch, 0, 0) = sum / denom;
        }
    return y;
}

template <class T>
ForwardResult<T> forward_impl(const NetworkGraph<T>& net, const Tensor<T>& batch,
                              const ForwardOptions& opts, NetworkGraph<T>* mutable_net,
                              ForwardTrace<T>* trace) {
    require_rank(batch, 4, "forward input");
    if (batch.extent(1) != net.input_shape[0] || batch.extent(2) != net.input_shape[1] ||
        batch.extent(3) != net.input_shape[2])
        throw ShapeMismatch("forward input does not match network input shape");
    if (net.nodes.empty()) throw ShapeMismatch("network has no layers");

    if (trace) {
        trace->input = batch;
        trace->nodes.assign(net.nodes.size(), {});
    }

    std::vector<Tensor<T>> outs;
    outs.reserve(net.nodes.size());
    const Tensor<T>* cur = &batch;
    for (std::size_t i = 0; i < net.nodes.size(); ++i) {
        const auto& node = net.nodes[i];
        ConvLayer<T>* mut = mutable_net ? &mutable_net->nodes[i].conv : nullptr;
        NodeTrace<T>* nt = trace ? &trace->nodes[i] : nullptr;
        Tensor<T> f = layer_forward_nchw(node.conv, *cur, opts, mut, nt);
        if (node.shortcut_in) {
            const auto& sc = *node.shortcut_in;
            if (sc.src_node < 0 || sc.src_node >= static_cast<int>(i))
                throw ShapeMismatch("shortcut source does not precede destination");
            Tensor<T> add = shortcut_apply_nchw(sc, outs[static_cast<std::size_t>(sc.src_node)],
                                                opts, nt ? &nt->shortcut_raw : nullptr);
            if (!f.same_shape(add))
                throw ShapeMismatch("shortcut output shape disagrees with layer output");
            for (std::size_t k = 0; k < f.data.size(); ++k) f.data[k] += add.data[k];
        }
        if (nt) nt->out = f;
        outs.push_back(std::move(f));
        cur = &outs.back();
    }

    Tensor<T> pooled = global_avg_pool(outs.back());
    Tensor<T> pre = conv2d_nchw(net.head.fc.w, pooled, opts.sum);
    add_bias_inplace(pre, net.head.fc.bias);

    const int n = pre.extent(0), classes = pre.extent(1);
    Tensor<T> logits({n, classes});
    for (int b = 0; b < n; ++b)
        for (int c = 0; c < classes; ++c) logits(b, c) = pre(b, c, 0, 0);

    Tensor<T> probs({n, classes});
    for (int b = 0; b < n; ++b) {
        T mx = logits(b, 0);
        for (int c = 1; c < classes; ++c) mx = std::max(mx, logits(b, c));
        T denom = T(0);
        for (int c = 0; c < classes; ++c) {
            const T e = std::exp(logits(b, c) - mx);
            probs(b, c) = e;
            denom += e;
        }
        for (int c = 0; c < classes; ++c) probs(b, c) /= denom;
    }

    if (trace) {
        trace->pooled = std::move(pooled);
        trace->logits = logits;
        trace->probs = probs;
    }
    return {std::move(logits), std::move(probs)};
}

} // namespace detail

/// Applies one conv layer (conv + bias + pipeline) to a volume (C,h,w) or a
/// batch (N,C,h,w).
template <class T>
Tensor<T> layer_forward(const ConvLayer<T>& layer, const Tensor<T>& x,
                        const ForwardOptions& opts = {}) {
    ConvLayer<T>* mut = nullptr;
    NodeTrace<T>* tr = nullptr;
    if (x.rank() == 3)
        return detail::squeeze_batch(
            detail::layer_forward_nchw(layer, detail::lift_batch(x), opts, mut, tr));
    return detail::layer_forward_nchw(layer, x, opts, mut, tr);
}

/// Applies a shortcut to a source volume (C,h,w) or batch (N,C,h,w).
template <class T>
Tensor<T> shortcut_apply(const Shortcut<T>& sc, const Tensor<T>& x,
                         const ForwardOptions& opts = {}) {
    Tensor<T>* raw = nullptr;
    if (x.rank() == 3)
        return detail::squeeze_batch(
            detail::shortcut_apply_nchw(sc, detail::lift_batch(x), opts, raw));
    return detail::shortcut_apply_nchw(sc, x, opts, raw);
}

/// Read-only forward pass over a batch (N,C,h,w). Returns pre-softmax scores
/// and softmax probabilities, both (N, classes).
template <class T>
ForwardResult<T> forward(const NetworkGraph<T>& net, const Tensor<T>& batch,
                         const ForwardOptions& opts = {}, ForwardTrace<T>* trace = nullptr) {
    if (opts.update_running_stats)
        throw ConfigError("running-stat updates require the mutable forward overload");
    return detail::forward_impl(net, batch, opts, static_cast<NetworkGraph<T>*>(nullptr), trace);
}

/// Forward pass that may update BatchNorm running statistics in place.
template <class T>
ForwardResult<T> forward(NetworkGraph<T>& net, const Tensor<T>& batch,
                         const ForwardOptions& opts = {}, ForwardTrace<T>* trace = nullptr) {
    return detail::forward_impl(net, batch, opts, opts.update_running_stats ? &net : nullptr,
                                trace);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Checks every graph invariant and returns all violations found (empty = ok).
template <class T>
std::vector<std::string> validate_graph(const NetworkGraph<T>& net) {
    std::vector<std::string> bad;
    auto note = [&](std::size_t node, const std::string& msg) {
        bad.push_back("node " + std::to_string(node) + ": " + msg);
    };

    if (net.nodes.empty()) bad.push_back("network has no layers");
    for (std::size_t i = 0; i < net.nodes.size(); ++i) {
        const auto& node = net.nodes[i];
        try {
            node.conv.w.check();
        } catch (const Error& e) {
            note(i, e.what());
        }
        if (static_cast<int>(node.conv.bias.size()) != node.conv.w.out_channels())
            note(i, "bias length " + std::to_string(node.conv.bias.size()) +
                        " != output channels " + std::to_string(node.conv.w.out_channels()));
        for (std::size_t s = 0; s < node.conv.sigma.size(); ++s) {
            const auto& st = node.conv.sigma[s];
            if (st.kind == StageKind::BatchNorm) {
                const auto c = static_cast<std::size_t>(node.conv.w.out_channels());
                if (st.gamma.size() != c || st.beta.size() != c || st.running_mean.size() != c ||
                    st.running_var.size() != c)
                    note(i, "stage " + std::to_string(s) + " batchnorm parameters not sized to channels");
            }
            if (st.kind == StageKind::ReLU &&
                !(st.relu_subgrad_at_zero == T(0) || st.relu_subgrad_at_zero == T(1)))
                note(i, "relu subgradient at zero must be 0 or 1");
            if ((st.kind == StageKind::MaxPool || st.kind == StageKind::AvgPool) &&
                (st.pool_k < 1 || st.pool_stride < 1 || st.pool_pad < 0 || st.pool_pad >= st.pool_k))
                note(i, "stage " + std::to_string(s) + " pool geometry invalid");
        }
        if (node.shortcut_in) {
            const auto& sc = *node.shortcut_in;
            if (sc.src_node < 0 || sc.src_node >= static_cast<int>(i))
                note(i, "shortcut source " + std::to_string(sc.src_node) +
                            " does not precede destination");
            if (sc.kind == ShortcutKind::Projection) {
                try {
                    sc.proj.check();
                } catch (const Error& e) {
                    note(i, e.what());
                }
                if (static_cast<int>(sc.proj_bias.size()) != sc.proj.out_channels())
                    note(i, "projection bias length mismatch");
            }
            for (const auto& row : sc.fold)
                for (const auto& e : row)
                    if (e.sign != 1 && e.sign != -1) note(i, "fold sign must be +1 or -1");
        }
    }

    if (net.head.fc.w.w.rank() == 4 && (net.head.fc.w.kh() != 1 || net.head.fc.w.kw() != 1))
        bad.push_back("head fc kernel must be 1x1");
    if (!net.head.fc.sigma.empty()) bad.push_back("head fc pipeline must be empty");
    if (static_cast<int>(net.head.fc.bias.size()) != net.head.fc.w.out_channels())
        bad.push_back("head fc bias length mismatch");

    try {
        auto shapes = infer_shapes(net);
        if (!shapes.empty() && shapes.back().c != net.head.fc.w.in_channels())
            bad.push_back("head fc input channels disagree with last node output");
    } catch (const Error& e) {
        bad.push_back(std::string("shape inference: ") + e.what());
    }

    NetworkGraph<T> copy_for_consumers = net;
    copy_for_consumers.rebuild_consumers();
    if (net.consumers != copy_for_consumers.consumers)
        bad.push_back("consumer index is not the inverse of the producer relation");

    return bad;
}

} // namespace fpt

#endif
