#ifndef FPT_TEST_SUPPORT_HPP
#define FPT_TEST_SUPPORT_HPP

#include <random>
#include <vector>

#include "fpt/autodiff.hpp"
#include "fpt/graph.hpp"

namespace fpt::testing {

template <class T>
Tensor<T> random_tensor(std::mt19937_64& rng, std::vector<int> shape, T lo = T(-1), T hi = T(1)) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<T> d(lo, hi);
    for (auto& v : t.data) v = d(rng);
    return t;
}

template <class T>
Kernel4<T> random_kernel(std::mt19937_64& rng, int co, int ci, int k, int stride = 1,
                         int pad = -1) {
    return Kernel4<T>(random_tensor<T>(rng, {co, ci, k, k}, T(-0.5), T(0.5)), stride,
                      pad < 0 ? (k - 1) / 2 : pad);
}

/// Minimal head: global pool + 1x1 fc over `channels` into `classes`.
template <class T>
void attach_head(NetworkGraph<T>& net, std::mt19937_64& rng, int channels, int classes) {
    net.head.fc.w = random_kernel<T>(rng, classes, channels, 1, 1, 0);
    net.head.fc.bias.assign(static_cast<std::size_t>(classes), T(0));
    net.rebuild_consumers();
}

/// Plain conv node with an optional pipeline.
template <class T>
LayerNode<T> conv_node(std::mt19937_64& rng, int co, int ci, int k, bool batchnorm, bool relu,
                       int stride = 1) {
    LayerNode<T> node;
    node.conv.w = random_kernel<T>(rng, co, ci, k, stride);
    node.conv.bias.resize(static_cast<std::size_t>(co));
    std::uniform_real_distribution<T> d(T(-0.2), T(0.2));
    for (auto& b : node.conv.bias) b = d(rng);
    if (batchnorm) node.conv.sigma.push_back(Stage<T>::batchnorm(co));
    if (relu) node.conv.sigma.push_back(Stage<T>::relu());
    return node;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    T mx = T(0);
    for (std::size_t i = 0; i < a.data.size(); ++i)
        mx = std::max(mx, std::abs(a.data[i] - b.data[i]));
    return mx;
}

/// Guarded relative error: |a-b| / max(|a|, |b|, floor).
template <class T>
T rel_err(T a, T b, T floor = T(1e-3)) {
    return std::abs(a - b) / std::max({floor, std::abs(a), std::abs(b)});
}

/// Nodes at or upstream of a ReLU kink or a near-tied max-pool window, whose
/// parameters central differences cannot check reliably. Returns the smallest
/// affected node index, or the node count if the trace is kink-free.
template <class T>
int first_kink_node(const NetworkGraph<T>& net, const ForwardTrace<T>& trace, T threshold) {
    int first = static_cast<int>(net.nodes.size());
    for (std::size_t i = 0; i < net.nodes.size(); ++i) {
        const auto& node = net.nodes[i];
        for (std::size_t s = 0; s < node.conv.sigma.size(); ++s) {
            const auto& st = node.conv.sigma[s];
            const auto& tr = trace.nodes[i].stages[s];
            if (st.kind == StageKind::ReLU) {
                for (T v : tr.in.data)
                    if (std::abs(v) < threshold) return static_cast<int>(i);
            } else if (st.kind == StageKind::MaxPool) {
                // runner-up gap per window
                const Tensor<T>& x = tr.in;
                const int h = x.extent(2), w = x.extent(3);
                std::size_t p = 0;
                const int n = x.extent(0), c = x.extent(1);
                const int ho = pool_out_extent(h, st.pool_k, st.pool_stride, st.pool_pad);
                const int wo = pool_out_extent(w, st.pool_k, st.pool_stride, st.pool_pad);
                for (int b = 0; b < n; ++b)
                    for (int ch = 0; ch < c; ++ch)
                        for (int oy = 0; oy < ho; ++oy)
                            for (int ox = 0; ox < wo; ++ox, ++p) {
                                T best = -std::numeric_limits<T>::infinity(), second = best;
                                for (int r = 0; r < st.pool_k; ++r) {
                                    const int iy = oy * st.pool_stride - st.pool_pad + r;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int cc = 0; cc < st.pool_k; ++cc) {
                                        const int ix = ox * st.pool_stride - st.pool_pad + cc;
                                        if (ix < 0 || ix >= w) continue;
                                        const T v = x(b, ch, iy, ix);
                                        if (v > best) {
                                            second = best;
                                            best = v;
                                        } else if (v > second) {
                                            second = v;
                                        }
                                    }
                                }
                                if (std::isfinite(second) && best - second < threshold)
                                    return static_cast<int>(i);
                            }
            }
        }
    }
    return first;
}

struct GradCheckResult {
    double max_rel_err = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

/// Compares backward gradients against central finite differences, excluding
/// parameters of nodes at or upstream of ReLU kinks (inputs within
/// 10*step of zero) where the difference quotient crosses the subgradient.
template <class T>
GradCheckResult gradient_check(NetworkGraph<T>& net, const Tensor<T>& batch,
                               const std::vector<int>& labels, T step = T(1e-5),
                               std::size_t param_stride = 1) {
    ForwardTrace<T> trace;
    const NetworkGraph<T>& cnet = net;
    forward(cnet, batch, {}, &trace);
    const int kink_node = first_kink_node(net, trace, T(10) * step);

    // parameter index -> owning node, in collect_params order (head = last)
    std::vector<int> owner;
    for (std::size_t i = 0; i < net.nodes.size(); ++i) {
        const auto& node = net.nodes[i];
        std::size_t count = node.conv.w.w.numel() + node.conv.bias.size();
        for (const auto& st : node.conv.sigma)
            if (st.kind == StageKind::BatchNorm) count += st.gamma.size() + st.beta.size();
        if (node.shortcut_in && node.shortcut_in->kind == ShortcutKind::Projection)
            count += node.shortcut_in->proj.w.numel() + node.shortcut_in->proj_bias.size();
        for (std::size_t k = 0; k < count; ++k) owner.push_back(static_cast<int>(i));
    }
    const std::size_t head_params = net.head.fc.w.w.numel() + net.head.fc.bias.size();
    for (std::size_t k = 0; k < head_params; ++k) owner.push_back(static_cast<int>(net.nodes.size()));

    auto res = backward(net, batch, labels);
    auto gptrs = collect_grads(res.grads);

    GradCheckResult out;
    const bool has_kink = kink_node < static_cast<int>(net.nodes.size());
    for (std::size_t k = 0; k < gptrs.size(); k += param_stride) {
        if (has_kink && owner[k] <= kink_node) {
            ++out.skipped;
            continue;
        }
        const T fd = finite_diff_grad(cnet, batch, labels, k, step);
        out.max_rel_err = std::max(out.max_rel_err,
                                   static_cast<double>(rel_err(*gptrs[k], fd)));
        ++out.checked;
    }
    return out;
}

} // namespace fpt::testing

#endif
