#ifndef FPT_MORPH_HPP
#define FPT_MORPH_HPP

#include <cstdint>
#include <cstring>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fpt/autodiff.hpp"
#include "fpt/graph.hpp"

namespace fpt {

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

enum class InitScheme { MatchedStd, He, Zeros, ScaledMatchedStd };

inline const char* init_scheme_name(InitScheme s) {
    switch (s) {
        case InitScheme::MatchedStd: return "matched_std";
        case InitScheme::He: return "he";
        case InitScheme::Zeros: return "zeros";
        case InitScheme::ScaledMatchedStd: return "scaled_matched_std";
    }
    return "?";
}

struct InitSpec {
    InitScheme scheme = InitScheme::MatchedStd;
    double multiplier = 1.0; // ScaledMatchedStd only
    std::uint64_t rng_seed = 0;
};

namespace detail {

template <class T>
T matched_bound(const Tensor<T>* context, double multiplier) {
    if (!context || context->data.empty())
        throw EmptyContext("matched-std initialization requires a non-empty context tensor");
    auto [mean, stddev] = tensor_stats(*context);
    (void)mean;
    return static_cast<T>(multiplier) * stddev / std::sqrt(T(3));
}

template <class T>
Tensor<T> sample_init_with(std::mt19937_64& rng, const std::vector<int>& shape,
                           const InitSpec& spec, const Tensor<T>* context,
                           long long he_fan_in = 0) {
    Tensor<T> out(shape);
    if (spec.scheme == InitScheme::Zeros) return out;
    T bound;
    if (spec.scheme == InitScheme::He) {
        long long fan_in = he_fan_in;
        if (fan_in <= 0) {
            fan_in = 1;
            for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        }
        bound = std::sqrt(T(6) / static_cast<T>(fan_in));
    } else {
        const double mult = spec.scheme == InitScheme::ScaledMatchedStd ? spec.multiplier : 1.0;
        if (spec.scheme == InitScheme::ScaledMatchedStd && mult <= 0)
            throw ConfigError("scaled matched-std multiplier must be > 0");
        bound = matched_bound(context, mult);
    }
    std::uniform_real_distribution<T> dist(-bound, bound);
    for (auto& v : out.data) v = dist(rng);
    return out;
}

} // namespace detail

/// Draws a tensor of new parameters per the initialization scheme.
/// MatchedStd: U(-s/sqrt(3), s/sqrt(3)) with s the population std of the
/// context tensor (the existing kernel for widening, the preceding kernel for
/// deepening). He: U(+-sqrt(6/fan_in)). Zeros: all zero. ScaledMatchedStd:
/// s multiplied before sampling.
template <class T>
Tensor<T> sample_init(const std::vector<int>& shape, const InitSpec& spec,
                      const Tensor<T>& context) {
    std::mt19937_64 rng(spec.rng_seed);
    return detail::sample_init_with(rng, shape, spec, &context);
}

// ---------------------------------------------------------------------------
// Transform specs and reports
// ---------------------------------------------------------------------------

struct WidenSpec {
    int target_node = 0;
    int extra_channels = 0; // 2E, positive even
    InitSpec init;
    bool init_biases = false; // default: new biases are zero
};

enum class FinalSigma { Identity, ReLU, Sigmoid };

struct DeepenSpec {
    int insert_after = 0;
    int block_channels = 0; // hidden width C^{o1}, positive even; 0 = auto (even-rounded input width)
    int kernel_size = 3;    // odd, shape-preserving padding
    InitSpec init;
    FinalSigma final_sigma = FinalSigma::Identity;
    bool hidden_batchnorm = true;
};

enum class ZeroSide { In, Out };

enum class InsertActivation { Infer, Identity, ReLU, Sigmoid, Tanh };

struct MorphReport {
    std::string kind;
    std::vector<int> nodes_touched;
    long long params_before = 0;
    long long params_after = 0;
    std::uint64_t preserved_checksum_before = 0;
    std::uint64_t preserved_checksum_after = 0;
    std::uint64_t rng_seed = 0;
    std::vector<int> replication_map; // net2wider unit map g

    bool preserves_existing_parameters() const {
        return preserved_checksum_before == preserved_checksum_after;
    }
};

// ---------------------------------------------------------------------------
// Preserved-parameter checksums
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t fnv1a_bytes(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

template <class T>
std::uint64_t fnv1a_value(std::uint64_t h, T v) {
    return fnv1a_bytes(h, &v, sizeof v);
}

/// Hash of the values now sitting where the old network's parameters sat.
/// Transforms in this artifact only ever grow tensors by appending rows,
/// columns or channels, so the old parameter positions are the leading block
/// of each surviving tensor; node_map sends old node indices to new ones.
template <class T>
std::uint64_t preserved_positions_checksum(const NetworkGraph<T>& oldn,
                                           const NetworkGraph<T>& newn,
                                           const std::vector<int>& node_map) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < oldn.nodes.size(); ++i) {
        const auto& oc = oldn.nodes[i].conv;
        const auto& nc = newn.nodes[static_cast<std::size_t>(node_map[i])].conv;
        const auto& os = oc.w.w.shape;
        for (int o = 0; o < os[0]; ++o)
            for (int m = 0; m < os[1]; ++m)
                for (int r = 0; r < os[2]; ++r)
                    for (int c = 0; c < os[3]; ++c) h = fnv1a_value(h, nc.w.w(o, m, r, c));
        for (std::size_t b = 0; b < oc.bias.size(); ++b) h = fnv1a_value(h, nc.bias[b]);
        for (std::size_t s = 0; s < oc.sigma.size(); ++s) {
            if (oc.sigma[s].kind != StageKind::BatchNorm) continue;
            const auto& ost = oc.sigma[s];
            const auto& nst = nc.sigma[s];
            for (std::size_t k = 0; k < ost.gamma.size(); ++k) h = fnv1a_value(h, nst.gamma[k]);
            for (std::size_t k = 0; k < ost.beta.size(); ++k) h = fnv1a_value(h, nst.beta[k]);
        }
        const auto& osc = oldn.nodes[i].shortcut_in;
        if (osc && osc->kind == ShortcutKind::Projection) {
            const auto& nsc = newn.nodes[static_cast<std::size_t>(node_map[i])].shortcut_in;
            const auto& ps = osc->proj.w.shape;
            for (int o = 0; o < ps[0]; ++o)
                for (int m = 0; m < ps[1]; ++m)
                    for (int r = 0; r < ps[2]; ++r)
                        for (int c = 0; c < ps[3]; ++c) h = fnv1a_value(h, nsc->proj.w(o, m, r, c));
            for (std::size_t b = 0; b < osc->proj_bias.size(); ++b)
                h = fnv1a_value(h, nsc->proj_bias[b]);
        }
    }
    const auto& ohs = oldn.head.fc.w.w.shape;
    for (int o = 0; o < ohs[0]; ++o)
        for (int m = 0; m < ohs[1]; ++m)
            for (int r = 0; r < ohs[2]; ++r)
                for (int c = 0; c < ohs[3]; ++c) h = fnv1a_value(h, newn.head.fc.w.w(o, m, r, c));
    for (std::size_t b = 0; b < oldn.head.fc.bias.size(); ++b)
        h = fnv1a_value(h, newn.head.fc.bias[b]);
    return h;
}

template <class T>
std::vector<int> identity_node_map(const NetworkGraph<T>& net) {
    std::vector<int> m(net.nodes.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<int>(i);
    return m;
}

template <class T>
Kernel4<T> kernel_like(const Kernel4<T>& ref, Tensor<T> w) {
    return Kernel4<T>(std::move(w), ref.stride, ref.padding);
}

/// Raw (pre-fold) output channel count of a shortcut given its source width.
template <class T>
int shortcut_raw_channels(const Shortcut<T>& sc, int src_channels) {
    switch (sc.kind) {
        case ShortcutKind::Identity: return src_channels;
        case ShortcutKind::ZeroPad: return sc.zeropad_channels;
        case ShortcutKind::Projection: return sc.proj.out_channels();
    }
    throw UnsupportedShortcutKind("unknown shortcut kind");
}

/// Rewrites Identity / ZeroPad shortcuts into fold form so channel maps can be
/// edited: the kind becomes Identity (raw = source) and the fold reproduces the
/// previous behaviour verbatim.
template <class T>
void materialize_fold(Shortcut<T>& sc, int src_channels) {
    if (sc.kind == ShortcutKind::Projection) {
        if (!sc.has_fold()) {
            sc.fold.resize(static_cast<std::size_t>(sc.proj.out_channels()));
            for (int c = 0; c < sc.proj.out_channels(); ++c)
                sc.fold[static_cast<std::size_t>(c)] = {{c, 1}};
        }
        return;
    }
    if (sc.has_fold()) return; // already reads source channels directly
    const int out_c = shortcut_raw_channels(sc, src_channels);
    sc.fold.resize(static_cast<std::size_t>(out_c));
    for (int c = 0; c < out_c; ++c)
        if (c < src_channels) sc.fold[static_cast<std::size_t>(c)] = {{c, 1}};
    sc.kind = ShortcutKind::Identity;
    sc.zeropad_channels = 0;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Residual adaptation for widening
// ---------------------------------------------------------------------------

/// Adapts a shortcut whose SOURCE volume has just been widened from
/// `old_src_channels` by E paired (L, R) channel groups. Identity and zero-pad
/// shortcuts gain (+1 on L, -1 on R) fold pairs; projection shortcuts extend
/// their kernel with (V_L, -V_L) column blocks. Repeated widenings compose by
/// applying this again.
template <class T>
Shortcut<T> adapt_residual_for_widen(const Shortcut<T>& shortcut, int old_src_channels, int E,
                                     const InitSpec& init, std::mt19937_64& rng) {
    Shortcut<T> sc = shortcut;
    switch (sc.kind) {
        case ShortcutKind::Identity:
        case ShortcutKind::ZeroPad: {
            detail::materialize_fold(sc, old_src_channels);
            const int rows = static_cast<int>(sc.fold.size());
            for (int j = 0; j < E; ++j) {
                auto& row = sc.fold[static_cast<std::size_t>(j % rows)];
                row.push_back({old_src_channels + j, 1});
                row.push_back({old_src_channels + E + j, -1});
            }
            break;
        }
        case ShortcutKind::Projection: {
            Tensor<T> vl = detail::sample_init_with(
                rng, {sc.proj.out_channels(), E, sc.proj.kh(), sc.proj.kw()}, init, &sc.proj.w);
            Kernel4<T> kl = detail::kernel_like(sc.proj, vl);
            sc.proj = kernel_hstack<T>({sc.proj, kl, kernel_negate(kl)});
            break;
        }
        default:
            throw UnsupportedShortcutKind("cannot adapt this shortcut kind for widening");
    }
    return sc;
}

// ---------------------------------------------------------------------------
// R2WiderR
// ---------------------------------------------------------------------------

namespace detail {

/// Appends 2E per-channel parameter entries to every BatchNorm stage of a
/// pipeline. With `paired`, the L and R halves get equal values (the
/// function-preservation requirement rho_L == rho_R); otherwise both halves
/// are drawn independently.
template <class T>
void extend_pipeline_channels(std::vector<Stage<T>>& sigma, int E, bool paired,
                              const InitSpec& init, const Tensor<T>* gamma_context,
                              long long he_fan_in, std::mt19937_64& rng) {
    for (auto& st : sigma) {
        if (st.kind != StageKind::BatchNorm) continue;
        Tensor<T> g = sample_init_with(rng, {paired ? E : 2 * E}, init, gamma_context, he_fan_in);
        for (int half = 0; half < (paired ? 2 : 1); ++half)
            for (int j = 0; j < (paired ? E : 2 * E); ++j) st.gamma.push_back(g(j));
        for (int j = 0; j < 2 * E; ++j) {
            st.beta.push_back(T(0));
            st.running_mean.push_back(T(0));
            st.running_var.push_back(T(1));
        }
    }
}

template <class T>
void widen_consumer_kernel(Kernel4<T>& w, int E, bool paired, const InitSpec& init,
                           std::mt19937_64& rng) {
    if (paired) {
        Tensor<T> u = sample_init_with(rng, {w.out_channels(), E, w.kh(), w.kw()}, init, &w.w);
        Kernel4<T> ku = kernel_like(w, u);
        w = kernel_hstack<T>({w, ku, kernel_negate(ku)});
    } else {
        Tensor<T> u = sample_init_with(rng, {w.out_channels(), 2 * E, w.kh(), w.kw()}, init, &w.w);
        w = kernel_hstack<T>({w, kernel_like(w, u)});
    }
}

/// Shared surgery for r2_wider (paired) and random_pad_widen (unpaired).
template <class T>
MorphReport widen_impl(NetworkGraph<T>& net, const WidenSpec& spec, bool paired,
                       const char* kind_name) {
    if (spec.target_node < 0 || spec.target_node >= static_cast<int>(net.nodes.size()))
        throw ConfigError("widen target node does not exist");
    if (spec.extra_channels == 0) {
        MorphReport nop;
        nop.kind = kind_name;
        nop.params_before = nop.params_after = static_cast<long long>(param_count(net));
        const auto id = identity_node_map(net);
        nop.preserved_checksum_before = nop.preserved_checksum_after =
            preserved_positions_checksum(net, net, id);
        return nop;
    }
    if (spec.extra_channels < 0 || spec.extra_channels % 2 != 0)
        throw OddChannelCount("widening adds 2E channels; extra_channels must be positive and even");

    const int E = spec.extra_channels / 2;
    const NetworkGraph<T> before = net;
    const auto node_map = identity_node_map(net);
    const auto shapes = infer_shapes(net);

    MorphReport report;
    report.kind = kind_name;
    report.rng_seed = spec.init.rng_seed;
    report.params_before = static_cast<long long>(param_count(net));
    report.preserved_checksum_before = preserved_positions_checksum(before, before, node_map);

    std::mt19937_64 rng(spec.init.rng_seed);
    auto& node = net.nodes[static_cast<std::size_t>(spec.target_node)];
    const int old_c = node.conv.w.out_channels();
    report.nodes_touched.push_back(spec.target_node);

    // producer: new filter rows and biases
    {
        Kernel4<T>& w = node.conv.w;
        const long long fan_in = static_cast<long long>(w.in_channels()) * w.kh() * w.kw();
        if (paired) {
            Tensor<T> u = sample_init_with(rng, {E, w.in_channels(), w.kh(), w.kw()}, spec.init, &w.w);
            Kernel4<T> ku = kernel_like(w, u);
            w = kernel_vstack<T>({w, ku, ku});
            std::vector<T> c(static_cast<std::size_t>(E), T(0));
            if (spec.init_biases) {
                Tensor<T> cs = sample_init_with(rng, {E}, spec.init, &before.nodes[spec.target_node].conv.w.w, fan_in);
                c.assign(cs.data.begin(), cs.data.end());
            }
            for (int half = 0; half < 2; ++half)
                for (int j = 0; j < E; ++j) node.conv.bias.push_back(c[static_cast<std::size_t>(j)]);
        } else {
            Tensor<T> u = sample_init_with(rng, {2 * E, w.in_channels(), w.kh(), w.kw()}, spec.init, &w.w);
            w = kernel_vstack<T>({w, kernel_like(w, u)});
            std::vector<T> c(static_cast<std::size_t>(2 * E), T(0));
            if (spec.init_biases) {
                Tensor<T> cs = sample_init_with(rng, {2 * E}, spec.init, &before.nodes[spec.target_node].conv.w.w, fan_in);
                c.assign(cs.data.begin(), cs.data.end());
            }
            for (T v : c) node.conv.bias.push_back(v);
        }
        extend_pipeline_channels(node.conv.sigma, E, paired, spec.init,
                                 &before.nodes[spec.target_node].conv.w.w, fan_in, rng);
    }

    // a shortcut INTO the target contributes zero to the new channels, so the
    // L and R halves stay equal
    if (node.shortcut_in) {
        auto& sc = *node.shortcut_in;
        const int src_c = shapes[static_cast<std::size_t>(sc.src_node)].c;
        materialize_fold(sc, src_c);
        for (int j = 0; j < 2 * E; ++j) sc.fold.emplace_back();
    }

    // consumers of the widened volume
    net.rebuild_consumers();
    for (const auto& consumer : net.consumers[static_cast<std::size_t>(spec.target_node)]) {
        switch (consumer.kind) {
            case Consumer::Kind::Conv: {
                widen_consumer_kernel(net.nodes[static_cast<std::size_t>(consumer.node)].conv.w, E,
                                      paired, spec.init, rng);
                report.nodes_touched.push_back(consumer.node);
                break;
            }
            case Consumer::Kind::Head: {
                widen_consumer_kernel(net.head.fc.w, E, paired, spec.init, rng);
                break;
            }
            case Consumer::Kind::Shortcut: {
                auto& dest = net.nodes[static_cast<std::size_t>(consumer.node)];
                dest.shortcut_in = adapt_residual_for_widen(*dest.shortcut_in, old_c, E, spec.init, rng);
                if (!paired) {
                    // unpaired baseline: projection extensions and fold signs keep the
                    // r2_wider structure, but projection columns are redrawn unpaired
                    auto& sc = *dest.shortcut_in;
                    if (sc.kind == ShortcutKind::Projection) {
                        Tensor<T>& w = sc.proj.w;
                        Tensor<T> fresh = sample_init_with(
                            rng, {sc.proj.out_channels(), 2 * E, sc.proj.kh(), sc.proj.kw()},
                            spec.init, &w);
                        for (int o = 0; o < sc.proj.out_channels(); ++o)
                            for (int j = 0; j < 2 * E; ++j)
                                for (int r = 0; r < sc.proj.kh(); ++r)
                                    for (int c = 0; c < sc.proj.kw(); ++c)
                                        w(o, old_c + j, r, c) = fresh(o, j, r, c);
                    }
                }
                report.nodes_touched.push_back(consumer.node);
                break;
            }
        }
    }

    net.rebuild_consumers();
    report.params_after = static_cast<long long>(param_count(net));
    report.preserved_checksum_after = preserved_positions_checksum(before, net, node_map);
    return report;
}

} // namespace detail

/// R2WiderR: widens the target node's output volume by 2E channels arranged as
/// equal (L, R) groups, extends every consumer with (U, -U) column blocks and
/// adapts residual connections, leaving the network function unchanged.
template <class T>
MorphReport r2_wider(NetworkGraph<T>& net, const WidenSpec& spec) {
    if (spec.extra_channels <= 0)
        throw OddChannelCount("r2_wider adds 2E channels; extra_channels must be positive and even");
    return detail::widen_impl(net, spec, /*paired=*/true, "r2_wider");
}

/// Baseline: identical structural surgery to r2_wider but with all new
/// parameters drawn independently (no +- pairing). Not function preserving.
template <class T>
MorphReport random_pad_widen(NetworkGraph<T>& net, const WidenSpec& spec) {
    return detail::widen_impl(net, spec, /*paired=*/false, "random_pad_widen");
}

// ---------------------------------------------------------------------------
// Zero-initialized blocks and R2DeeperR
// ---------------------------------------------------------------------------

/// Builds the two conv layers of a zero-output block on `channels` input
/// channels: W1 = vstack(U1, U1), W2 = hstack(U2, -U2), b2 = 0. The block
/// output is identically zero for every input while half of the new
/// parameters remain free.
template <class T>
std::pair<ConvLayer<T>, ConvLayer<T>> zero_init_block(int channels, const DeepenSpec& spec,
                                                      const Tensor<T>& context,
                                                      std::mt19937_64& rng) {
    if (spec.final_sigma == FinalSigma::Sigmoid)
        throw InvalidFinalSigma("final nonlinearity must satisfy sigma(0) == 0; sigmoid does not");
    int width = spec.block_channels;
    if (width == 0) width = channels % 2 == 0 ? channels : channels + 1;
    if (width < 2 || width % 2 != 0)
        throw OddChannelCount("zero-init block width must be positive and even");
    const int k = spec.kernel_size;
    if (k < 1 || k % 2 == 0)
        throw ShapeMismatch("zero-init block kernel size must be odd to preserve spatial shape");
    const int pad = (k - 1) / 2;
    const int half = width / 2;

    ConvLayer<T> first;
    Tensor<T> u1 = detail::sample_init_with(rng, {half, channels, k, k}, spec.init, &context);
    Kernel4<T> ku1(std::move(u1), 1, pad);
    first.w = kernel_vstack<T>({ku1, ku1});
    first.bias.assign(static_cast<std::size_t>(width), T(0));
    if (spec.hidden_batchnorm) first.sigma.push_back(Stage<T>::batchnorm(width));
    first.sigma.push_back(Stage<T>::relu());

    ConvLayer<T> second;
    Tensor<T> u2 = detail::sample_init_with(rng, {channels, half, k, k}, spec.init, &context);
    Kernel4<T> ku2(std::move(u2), 1, pad);
    second.w = kernel_hstack<T>({ku2, kernel_negate(ku2)});
    second.bias.assign(static_cast<std::size_t>(channels), T(0));
    if (spec.final_sigma == FinalSigma::ReLU) second.sigma.push_back(Stage<T>::relu());

    return {std::move(first), std::move(second)};
}

namespace detail {

template <class T>
MorphReport deepen_impl(NetworkGraph<T>& net, const DeepenSpec& spec, bool paired,
                        const char* kind_name) {
    if (net.nodes.empty()) throw ConfigError("cannot deepen an empty network");
    const int p = spec.insert_after;
    if (p < 0 || p >= static_cast<int>(net.nodes.size()))
        throw ConfigError("deepen insertion point does not exist");

    const NetworkGraph<T> before = net;
    const auto shapes = infer_shapes(net);
    const int channels = shapes[static_cast<std::size_t>(p)].c;

    MorphReport report;
    report.kind = kind_name;
    report.rng_seed = spec.init.rng_seed;
    report.params_before = static_cast<long long>(param_count(net));
    report.preserved_checksum_before =
        preserved_positions_checksum(before, before, identity_node_map(before));

    std::mt19937_64 rng(spec.init.rng_seed);
    const Tensor<T>& context = net.nodes[static_cast<std::size_t>(p)].conv.w.w;

    ConvLayer<T> first, second;
    if (paired) {
        auto block = zero_init_block(channels, spec, context, rng);
        first = std::move(block.first);
        second = std::move(block.second);
    } else {
        // baseline: same shapes, all parameters independent
        if (spec.final_sigma == FinalSigma::Sigmoid)
            throw InvalidFinalSigma("final nonlinearity must satisfy sigma(0) == 0; sigmoid does not");
        int width = spec.block_channels;
        if (width == 0) width = channels % 2 == 0 ? channels : channels + 1;
        if (width < 2 || width % 2 != 0)
            throw OddChannelCount("block width must be positive and even");
        const int k = spec.kernel_size;
        if (k < 1 || k % 2 == 0) throw ShapeMismatch("block kernel size must be odd");
        const int pad = (k - 1) / 2;
        first.w = Kernel4<T>(sample_init_with(rng, {width, channels, k, k}, spec.init, &context), 1, pad);
        first.bias.assign(static_cast<std::size_t>(width), T(0));
        if (spec.hidden_batchnorm) first.sigma.push_back(Stage<T>::batchnorm(width));
        first.sigma.push_back(Stage<T>::relu());
        second.w = Kernel4<T>(sample_init_with(rng, {channels, width, k, k}, spec.init, &context), 1, pad);
        second.bias.assign(static_cast<std::size_t>(channels), T(0));
        if (spec.final_sigma == FinalSigma::ReLU) second.sigma.push_back(Stage<T>::relu());
    }

    // re-wire consumers of x^p to the new block output x^e
    for (int j = 0; j < static_cast<int>(net.nodes.size()); ++j) {
        auto& sc = net.nodes[static_cast<std::size_t>(j)].shortcut_in;
        if (!sc) continue;
        if (sc->src_node > p)
            sc->src_node += 2;
        else if (sc->src_node == p && j > p)
            sc->src_node = p + 2;
    }

    LayerNode<T> n1;
    n1.conv = std::move(first);
    LayerNode<T> n2;
    n2.conv = std::move(second);
    Shortcut<T> identity;
    identity.kind = ShortcutKind::Identity;
    identity.src_node = p;
    n2.shortcut_in = identity;

    net.nodes.insert(net.nodes.begin() + p + 1, {std::move(n1), std::move(n2)});
    net.rebuild_consumers();

    std::vector<int> node_map(before.nodes.size());
    for (std::size_t i = 0; i < node_map.size(); ++i)
        node_map[i] = static_cast<int>(i) <= p ? static_cast<int>(i) : static_cast<int>(i) + 2;

    report.nodes_touched = {p + 1, p + 2};
    report.params_after = static_cast<long long>(param_count(net));
    report.preserved_checksum_after = preserved_positions_checksum(before, net, node_map);
    return report;
}

} // namespace detail

/// R2DeeperR: inserts x^e = z(x^i) + x^i after node `insert_after`, where z is
/// a zero-initialized residual block. Adds exactly two conv layers and leaves
/// the network function unchanged.
template <class T>
MorphReport r2_deeper(NetworkGraph<T>& net, const DeepenSpec& spec) {
    return detail::deepen_impl(net, spec, /*paired=*/true, "r2_deeper");
}

/// Baseline: same structural surgery as r2_deeper with unpaired random
/// parameters. Not function preserving.
template <class T>
MorphReport random_pad_deepen(NetworkGraph<T>& net, const DeepenSpec& spec) {
    return detail::deepen_impl(net, spec, /*paired=*/false, "random_pad_deepen");
}

// ---------------------------------------------------------------------------
// Net2Net
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void require_replication_safe_target(const NetworkGraph<T>& net, int target, const char* who) {
    if (target < 0 || target >= static_cast<int>(net.nodes.size()))
        throw ConfigError(std::string(who) + ": target node does not exist");
    if (net.nodes[static_cast<std::size_t>(target)].shortcut_in)
        throw UnadaptableConsumer(std::string(who) +
                                  ": target volume is a residual destination");
    for (const auto& consumer : net.consumers[static_cast<std::size_t>(target)])
        if (consumer.kind == Consumer::Kind::Shortcut)
            throw UnadaptableConsumer(std::string(who) +
                                      ": target volume feeds a residual connection");
}

} // namespace detail

/// Net2WiderNet with an explicit unit map g of length q (g[j] == j for j < n).
/// Rewrites the target's filters as copies via g and divides every consumer
/// column by its replication count. Existing parameters are rewritten, so the
/// transform does not preserve them bit-for-bit; with noise_std == 0 it is
/// function preserving up to arithmetic reassociation.
template <class T>
MorphReport net2wider_with_map(NetworkGraph<T>& net, int target_node, const std::vector<int>& g,
                               double noise_std, std::uint64_t noise_seed) {
    net.rebuild_consumers();
    detail::require_replication_safe_target(net, target_node, "net2wider");
    auto& node = net.nodes[static_cast<std::size_t>(target_node)];
    const int n = node.conv.w.out_channels();
    const int q = static_cast<int>(g.size());
    if (q <= n) throw WidthNotIncreased("net2wider requires q > current width");
    for (int j = 0; j < n; ++j)
        if (g[static_cast<std::size_t>(j)] != j)
            throw ConfigError("net2wider map must be the identity on existing units");
    for (int j = n; j < q; ++j)
        if (g[static_cast<std::size_t>(j)] < 0 || g[static_cast<std::size_t>(j)] >= n)
            throw ConfigError("net2wider map entries must reference existing units");

    const NetworkGraph<T> before = net;
    const auto node_map = detail::identity_node_map(net);

    MorphReport report;
    report.kind = "net2wider";
    report.rng_seed = noise_seed;
    report.replication_map = g;
    report.params_before = static_cast<long long>(param_count(net));
    report.preserved_checksum_before =
        detail::preserved_positions_checksum(before, before, node_map);
    report.nodes_touched.push_back(target_node);

    std::vector<int> counts(static_cast<std::size_t>(n), 0);
    for (int j = 0; j < q; ++j) ++counts[static_cast<std::size_t>(g[static_cast<std::size_t>(j)])];

    // producer: rows copied through g
    {
        const Kernel4<T>& w = node.conv.w;
        Tensor<T> nw({q, w.in_channels(), w.kh(), w.kw()});
        for (int j = 0; j < q; ++j)
            for (int m = 0; m < w.in_channels(); ++m)
                for (int r = 0; r < w.kh(); ++r)
                    for (int c = 0; c < w.kw(); ++c)
                        nw(j, m, r, c) = w.w(g[static_cast<std::size_t>(j)], m, r, c);
        node.conv.w = detail::kernel_like(w, std::move(nw));
        std::vector<T> nb(static_cast<std::size_t>(q));
        for (int j = 0; j < q; ++j)
            nb[static_cast<std::size_t>(j)] = node.conv.bias[static_cast<std::size_t>(g[static_cast<std::size_t>(j)])];
        node.conv.bias = std::move(nb);
        for (auto& st : node.conv.sigma) {
            if (st.kind != StageKind::BatchNorm) continue;
            auto remap = [&](std::vector<T>& v) {
                std::vector<T> nv(static_cast<std::size_t>(q));
                for (int j = 0; j < q; ++j)
                    nv[static_cast<std::size_t>(j)] = v[static_cast<std::size_t>(g[static_cast<std::size_t>(j)])];
                v = std::move(nv);
            };
            remap(st.gamma);
            remap(st.beta);
            remap(st.running_mean);
            remap(st.running_var);
        }
    }

    // consumers: columns copied through g and divided by replication counts
    auto adapt_consumer = [&](Kernel4<T>& w) {
        Tensor<T> nw({w.out_channels(), q, w.kh(), w.kw()});
        for (int o = 0; o < w.out_channels(); ++o)
            for (int j = 0; j < q; ++j) {
                const int src = g[static_cast<std::size_t>(j)];
                const T scale = T(1) / static_cast<T>(counts[static_cast<std::size_t>(src)]);
                for (int r = 0; r < w.kh(); ++r)
                    for (int c = 0; c < w.kw(); ++c) nw(o, j, r, c) = w.w(o, src, r, c) * scale;
            }
        w = detail::kernel_like(w, std::move(nw));
    };
    for (const auto& consumer : net.consumers[static_cast<std::size_t>(target_node)]) {
        if (consumer.kind == Consumer::Kind::Conv) {
            adapt_consumer(net.nodes[static_cast<std::size_t>(consumer.node)].conv.w);
            report.nodes_touched.push_back(consumer.node);
        } else if (consumer.kind == Consumer::Kind::Head) {
            adapt_consumer(net.head.fc.w);
        }
    }

    if (noise_std > 0) {
        std::mt19937_64 rng(noise_seed);
        std::normal_distribution<T> noise(T(0), static_cast<T>(noise_std));
        Kernel4<T>& w = node.conv.w;
        for (int j = n; j < q; ++j)
            for (int m = 0; m < w.in_channels(); ++m)
                for (int r = 0; r < w.kh(); ++r)
                    for (int c = 0; c < w.kw(); ++c) w.w(j, m, r, c) += noise(rng);
        for (const auto& consumer : net.consumers[static_cast<std::size_t>(target_node)]) {
            Kernel4<T>* cw = nullptr;
            if (consumer.kind == Consumer::Kind::Conv)
                cw = &net.nodes[static_cast<std::size_t>(consumer.node)].conv.w;
            else if (consumer.kind == Consumer::Kind::Head)
                cw = &net.head.fc.w;
            if (!cw) continue;
            for (int o = 0; o < cw->out_channels(); ++o)
                for (int j = n; j < q; ++j)
                    for (int r = 0; r < cw->kh(); ++r)
                        for (int c = 0; c < cw->kw(); ++c) cw->w(o, j, r, c) += noise(rng);
        }
    }

    net.rebuild_consumers();
    report.params_after = static_cast<long long>(param_count(net));
    report.preserved_checksum_after = detail::preserved_positions_checksum(before, net, node_map);
    return report;
}

/// Net2WiderNet: widens the target volume from n to q units by duplicating
/// randomly chosen existing units.
template <class T>
MorphReport net2wider(NetworkGraph<T>& net, int target_node, int new_width, double noise_std,
                      std::uint64_t seed) {
    if (target_node < 0 || target_node >= static_cast<int>(net.nodes.size()))
        throw ConfigError("net2wider: target node does not exist");
    const int n = net.nodes[static_cast<std::size_t>(target_node)].conv.w.out_channels();
    if (new_width <= n) throw WidthNotIncreased("net2wider requires q > current width");
    std::vector<int> g(static_cast<std::size_t>(new_width));
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (int j = 0; j < new_width; ++j)
        g[static_cast<std::size_t>(j)] = j < n ? j : pick(rng);
    return net2wider_with_map(net, target_node, g, noise_std, seed ^ 0x9e3779b97f4a7c15ull);
}

/// Net2DeeperNet: inserts a 1x1 identity-kernel layer after `insert_after`.
/// Requires an idempotent activation; sigmoid and tanh are rejected.
template <class T>
MorphReport net2deeper(NetworkGraph<T>& net, int insert_after,
                       InsertActivation activation = InsertActivation::Infer) {
    if (net.nodes.empty()) throw ConfigError("cannot deepen an empty network");
    const int p = insert_after;
    if (p < 0 || p >= static_cast<int>(net.nodes.size()))
        throw ConfigError("net2deeper insertion point does not exist");
    if (activation == InsertActivation::Sigmoid || activation == InsertActivation::Tanh)
        throw NonIdempotentActivation("net2deeper only works with idempotent activations");

    const auto& host = net.nodes[static_cast<std::size_t>(p)].conv;
    InsertActivation act = activation;
    if (act == InsertActivation::Infer) {
        act = InsertActivation::Identity;
        for (const auto& st : host.sigma)
            if (st.kind == StageKind::ReLU) act = InsertActivation::ReLU;
    }

    const NetworkGraph<T> before = net;
    const auto shapes = infer_shapes(net);
    const int channels = shapes[static_cast<std::size_t>(p)].c;

    MorphReport report;
    report.kind = "net2deeper";
    report.params_before = static_cast<long long>(param_count(net));
    report.preserved_checksum_before =
        detail::preserved_positions_checksum(before, before, detail::identity_node_map(before));

    LayerNode<T> node;
    Tensor<T> eye({channels, channels, 1, 1});
    for (int c = 0; c < channels; ++c) eye(c, c, 0, 0) = T(1);
    node.conv.w = Kernel4<T>(std::move(eye), 1, 0);
    node.conv.bias.assign(static_cast<std::size_t>(channels), T(0));
    if (act == InsertActivation::ReLU) {
        T subgrad = T(1);
        for (const auto& st : host.sigma)
            if (st.kind == StageKind::ReLU) subgrad = st.relu_subgrad_at_zero;
        node.conv.sigma.push_back(Stage<T>::relu(subgrad));
    }

    for (int j = 0; j < static_cast<int>(net.nodes.size()); ++j) {
        auto& sc = net.nodes[static_cast<std::size_t>(j)].shortcut_in;
        if (!sc) continue;
        if (sc->src_node > p)
            sc->src_node += 1;
        else if (sc->src_node == p && j > p)
            sc->src_node = p + 1;
    }
    net.nodes.insert(net.nodes.begin() + p + 1, std::move(node));
    net.rebuild_consumers();

    std::vector<int> node_map(before.nodes.size());
    for (std::size_t i = 0; i < node_map.size(); ++i)
        node_map[i] = static_cast<int>(i) <= p ? static_cast<int>(i) : static_cast<int>(i) + 1;

    report.nodes_touched = {p + 1};
    report.params_after = static_cast<long long>(param_count(net));
    report.preserved_checksum_after = detail::preserved_positions_checksum(before, net, node_map);
    return report;
}

// ---------------------------------------------------------------------------
// NetMorph widening
// ---------------------------------------------------------------------------

/// NetMorph widening: appends E channels (any parity) solving the network
/// morphism equation with one zero factor. zero_side == In zeroes the new
/// producer rows; zero_side == Out zeroes the new consumer columns. Existing
/// parameters are preserved.
template <class T>
MorphReport netmorph_wider(NetworkGraph<T>& net, int target_node, int extra_channels,
                           ZeroSide zero_side, const InitSpec& init) {
    if (extra_channels < 1) throw ConfigError("netmorph_wider requires E >= 1");
    net.rebuild_consumers();
    detail::require_replication_safe_target(net, target_node, "netmorph_wider");

    const NetworkGraph<T> before = net;
    const auto node_map = detail::identity_node_map(net);

    MorphReport report;
    report.kind = "netmorph_wider";
    report.rng_seed = init.rng_seed;
    report.params_before = static_cast<long long>(param_count(net));
    report.preserved_checksum_before =
        detail::preserved_positions_checksum(before, before, node_map);
    report.nodes_touched.push_back(target_node);

    std::mt19937_64 rng(init.rng_seed);
    const int E = extra_channels;
    auto& node = net.nodes[static_cast<std::size_t>(target_node)];

    {
        Kernel4<T>& w = node.conv.w;
        Tensor<T> rows =
            zero_side == ZeroSide::In
                ? Tensor<T>({E, w.in_channels(), w.kh(), w.kw()})
                : detail::sample_init_with(rng, {E, w.in_channels(), w.kh(), w.kw()}, init, &w.w);
        w = kernel_vstack<T>({w, detail::kernel_like(w, std::move(rows))});
        for (int j = 0; j < E; ++j) node.conv.bias.push_back(T(0));
        for (auto& st : node.conv.sigma) {
            if (st.kind != StageKind::BatchNorm) continue;
            for (int j = 0; j < E; ++j) {
                st.gamma.push_back(T(1));
                st.beta.push_back(T(0));
                st.running_mean.push_back(T(0));
                st.running_var.push_back(T(1));
            }
        }
    }

    for (const auto& consumer : net.consumers[static_cast<std::size_t>(target_node)]) {
        Kernel4<T>* cw = nullptr;
        if (consumer.kind == Consumer::Kind::Conv) {
            cw = &net.nodes[static_cast<std::size_t>(consumer.node)].conv.w;
            report.nodes_touched.push_back(consumer.node);
        } else if (consumer.kind == Consumer::Kind::Head) {
            cw = &net.head.fc.w;
        }
        if (!cw) continue;
        Tensor<T> cols =
            zero_side == ZeroSide::Out
                ? Tensor<T>({cw->out_channels(), E, cw->kh(), cw->kw()})
                : detail::sample_init_with(rng, {cw->out_channels(), E, cw->kh(), cw->kw()}, init,
                                           &cw->w);
        *cw = kernel_hstack<T>({*cw, detail::kernel_like(*cw, std::move(cols))});
    }

    net.rebuild_consumers();
    report.params_after = static_cast<long long>(param_count(net));
    report.preserved_checksum_after = detail::preserved_positions_checksum(before, net, node_map);
    return report;
}

} // namespace fpt

#endif
