#ifndef FPT_PROPCHECK_HPP
#define FPT_PROPCHECK_HPP

#include <random>
#include <string>
#include <vector>

#include "fpt/morph.hpp"

namespace fpt {

// Randomized function-preservation checks over generated networks. Used by the
// `verify` CLI subcommand and the test suites.

struct RandomNetConfig {
    int min_layers = 2;
    int max_layers = 6;
    int min_channels = 2;
    int max_channels = 16;
    int input_channels = 3;
    int spatial = 8;
    int classes = 5;
    bool allow_shortcuts = true;
    bool allow_batchnorm = true;
    bool allow_pool = true;
};

/// Random chain-plus-shortcuts network: a mix of plain layers, identity
/// residual pairs and one optional projection (downsampling) pair. The final
/// node is always a plain layer whose only consumer is the head, so every
/// transform has a valid target site.
template <class T>
NetworkGraph<T> random_net(std::mt19937_64& rng, const RandomNetConfig& cfg = {}) {
    auto pick = [&](int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(rng);
    };
    auto coin = [&](double p) {
        return std::uniform_real_distribution<double>(0, 1)(rng) < p;
    };

    NetworkGraph<T> net;
    net.input_shape = {cfg.input_channels, cfg.spatial, cfg.spatial};

    std::uniform_real_distribution<T> weight(T(-0.5), T(0.5));
    auto make_layer = [&](int co, int ci, int k, int stride, bool with_pool) {
        LayerNode<T> node;
        Tensor<T> w({co, ci, k, k});
        for (auto& v : w.data) v = weight(rng);
        node.conv.w = Kernel4<T>(std::move(w), stride, (k - 1) / 2);
        node.conv.bias.resize(static_cast<std::size_t>(co));
        for (auto& b : node.conv.bias) b = weight(rng);
        if (cfg.allow_batchnorm && coin(0.5)) {
            auto bn = Stage<T>::batchnorm(co);
            for (auto& g : bn.gamma) g = T(1) + weight(rng) * T(0.2);
            for (auto& b : bn.beta) b = weight(rng) * T(0.2);
            node.conv.sigma.push_back(std::move(bn));
        }
        if (coin(0.8)) node.conv.sigma.push_back(Stage<T>::relu());
        if (with_pool) node.conv.sigma.push_back(Stage<T>::avgpool(2, 2));
        return node;
    };

    const int target_layers = pick(cfg.min_layers, cfg.max_layers);
    int channels = pick(cfg.min_channels, cfg.max_channels);
    bool used_pool = false;
    bool used_projection = false;

    while (static_cast<int>(net.nodes.size()) < target_layers - 1) {
        const int remaining = target_layers - 1 - static_cast<int>(net.nodes.size());
        const int in_c = net.nodes.empty() ? cfg.input_channels : channels;
        if (cfg.allow_shortcuts && remaining >= 2 && coin(0.55)) {
            // residual pair with shortcut over it
            const int src = static_cast<int>(net.nodes.size()) - 1;
            if (src >= 0 && !used_projection && coin(0.3)) {
                // projection pair: channel change (and optional downsample)
                const int new_c = pick(cfg.min_channels, cfg.max_channels);
                const int stride = cfg.allow_pool && !used_pool && coin(0.5) ? 2 : 1;
                used_pool = used_pool || stride == 2;
                net.nodes.push_back(make_layer(new_c, in_c, 3, stride, false));
                net.nodes.push_back(make_layer(new_c, new_c, 3, 1, false));
                Shortcut<T> sc;
                sc.kind = ShortcutKind::Projection;
                sc.src_node = src;
                Tensor<T> pw({new_c, in_c, 1, 1});
                for (auto& v : pw.data) v = weight(rng);
                sc.proj = Kernel4<T>(std::move(pw), stride, 0);
                sc.proj_bias.resize(static_cast<std::size_t>(new_c));
                for (auto& b : sc.proj_bias) b = weight(rng) * T(0.2);
                net.nodes.back().shortcut_in = std::move(sc);
                used_projection = true;
                channels = new_c;
            } else if (src >= 0) {
                // identity pair: shape-preserving
                net.nodes.push_back(make_layer(channels, in_c, 3, 1, false));
                net.nodes.push_back(make_layer(channels, channels, 3, 1, false));
                Shortcut<T> sc;
                sc.kind = ShortcutKind::Identity;
                sc.src_node = src;
                net.nodes.back().shortcut_in = std::move(sc);
            } else {
                net.nodes.push_back(make_layer(channels, in_c, pick(0, 1) ? 3 : 1, 1, false));
            }
        } else {
            const int new_c = pick(cfg.min_channels, cfg.max_channels);
            const bool pool = cfg.allow_pool && !used_pool && coin(0.25);
            used_pool = used_pool || pool;
            net.nodes.push_back(make_layer(new_c, in_c, pick(0, 1) ? 3 : 1, 1, pool));
            channels = new_c;
        }
    }

    // final plain layer: a shortcut-free target site for every transform
    {
        const int in_c = net.nodes.empty() ? cfg.input_channels : channels;
        const int new_c = pick(cfg.min_channels, cfg.max_channels);
        net.nodes.push_back(make_layer(new_c, in_c, 3, 1, false));
        channels = new_c;
    }

    Tensor<T> hw({cfg.classes, channels, 1, 1});
    for (auto& v : hw.data) v = weight(rng);
    net.head.fc.w = Kernel4<T>(std::move(hw), 1, 0);
    net.head.fc.bias.assign(static_cast<std::size_t>(cfg.classes), T(0));
    net.rebuild_consumers();
    return net;
}

template <class T>
Tensor<T> random_batch(std::mt19937_64& rng, int n, const std::array<int, 3>& shape) {
    Tensor<T> batch({n, shape[0], shape[1], shape[2]});
    std::uniform_real_distribution<T> d(T(-1), T(1));
    for (auto& v : batch.data) v = d(rng);
    return batch;
}

template <class T>
T max_output_deviation(const NetworkGraph<T>& a, const NetworkGraph<T>& b, const Tensor<T>& batch,
                       SumMode mode) {
    ForwardOptions opts;
    opts.sum = mode;
    auto ra = forward(a, batch, opts);
    auto rb = forward(b, batch, opts);
    T mx = T(0);
    for (std::size_t i = 0; i < ra.logits.data.size(); ++i)
        mx = std::max(mx, std::abs(ra.logits.data[i] - rb.logits.data[i]));
    return mx;
}

struct PreservationRow {
    std::string transform;
    double max_dev_sequential = 0; // across all trials
    double max_dev_exact = 0;
    int trials = 0;
};

/// Applies every function-preserving transform to `trials` random networks and
/// records the worst output deviation per transform in both summation modes.
/// r2_wider and r2_deeper must show exactly zero deviation in exact mode.
template <class T>
std::vector<PreservationRow> preservation_suite(int trials, std::uint64_t base_seed,
                                                const RandomNetConfig& cfg = {}) {
    std::vector<PreservationRow> rows(5);
    rows[0].transform = "r2_wider";
    rows[1].transform = "r2_deeper";
    rows[2].transform = "net2wider";
    rows[3].transform = "net2deeper";
    rows[4].transform = "netmorph_wider";

    for (int t = 0; t < trials; ++t) {
        std::mt19937_64 rng(base_seed + static_cast<std::uint64_t>(t) * 7919);
        NetworkGraph<T> net = random_net<T>(rng, cfg);
        Tensor<T> batch = random_batch<T>(rng, 16, net.input_shape);
        const int n = static_cast<int>(net.nodes.size());
        auto pick = [&](int lo, int hi) {
            return std::uniform_int_distribution<int>(lo, hi)(rng);
        };

        auto record = [&](PreservationRow& row, const NetworkGraph<T>& morphed) {
            row.max_dev_sequential =
                std::max(row.max_dev_sequential,
                         static_cast<double>(max_output_deviation(net, morphed, batch,
                                                                  SumMode::Sequential)));
            row.max_dev_exact = std::max(
                row.max_dev_exact,
                static_cast<double>(max_output_deviation(net, morphed, batch, SumMode::Exact)));
            ++row.trials;
        };

        { // r2_wider on a random node
            NetworkGraph<T> m = net;
            WidenSpec ws;
            ws.target_node = pick(0, n - 1);
            ws.extra_channels = 2 * pick(1, 3);
            ws.init.scheme = InitScheme::MatchedStd;
            ws.init.rng_seed = base_seed ^ (static_cast<std::uint64_t>(t) << 8);
            r2_wider(m, ws);
            record(rows[0], m);
        }
        { // r2_deeper after a random node
            NetworkGraph<T> m = net;
            DeepenSpec ds;
            ds.insert_after = pick(0, n - 1);
            ds.init.scheme = InitScheme::MatchedStd;
            ds.init.rng_seed = base_seed ^ (static_cast<std::uint64_t>(t) << 9);
            ds.hidden_batchnorm = t % 2 == 0;
            r2_deeper(m, ds);
            record(rows[1], m);
        }
        { // net2wider on the (shortcut-free) last node
            NetworkGraph<T> m = net;
            const int width = m.nodes.back().conv.w.out_channels();
            net2wider(m, n - 1, width + pick(1, 4), 0.0,
                      base_seed ^ (static_cast<std::uint64_t>(t) << 10));
            record(rows[2], m);
        }
        { // net2deeper after a random node
            NetworkGraph<T> m = net;
            net2deeper(m, pick(0, n - 1));
            record(rows[3], m);
        }
        { // netmorph widening of the last node, alternating zero side
            NetworkGraph<T> m = net;
            InitSpec init;
            init.scheme = InitScheme::MatchedStd;
            init.rng_seed = base_seed ^ (static_cast<std::uint64_t>(t) << 11);
            netmorph_wider(m, n - 1, pick(1, 3), t % 2 == 0 ? ZeroSide::Out : ZeroSide::In, init);
            record(rows[4], m);
        }
    }
    return rows;
}

} // namespace fpt

#endif
