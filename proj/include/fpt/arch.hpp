#ifndef FPT_ARCH_HPP
#define FPT_ARCH_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "fpt/graph.hpp"

namespace fpt {

enum class ArchFamily { ResNetCifar10, ResNetCifar18, SmallConv, SmallConvWidened };

inline const char* arch_family_name(ArchFamily f) {
    switch (f) {
        case ArchFamily::ResNetCifar10: return "resnet_cifar10";
        case ArchFamily::ResNetCifar18: return "resnet_cifar18";
        case ArchFamily::SmallConv: return "small_conv";
        case ArchFamily::SmallConvWidened: return "small_conv_widened";
    }
    return "?";
}

/// Architecture family plus the filter-count multiplier r. Channel counts are
/// floor(64r) and floor(128r). `residual` disables shortcuts (used when
/// comparing against Net2Net, which cannot adapt them).
struct ArchSpec {
    ArchFamily family = ArchFamily::ResNetCifar10;
    double width_r = 1.0;
    bool residual = true;
};

namespace detail {

template <class T>
Kernel4<T> he_kernel(std::mt19937_64& rng, int co, int ci, int k, int stride, int pad) {
    Tensor<T> w({co, ci, k, k});
    const T bound = std::sqrt(T(6) / static_cast<T>(static_cast<long long>(ci) * k * k));
    std::uniform_real_distribution<T> dist(-bound, bound);
    for (auto& v : w.data) v = dist(rng);
    return Kernel4<T>(std::move(w), stride, pad);
}

template <class T>
LayerNode<T> resnet_conv(std::mt19937_64& rng, int co, int ci, int k, int stride, int pad) {
    LayerNode<T> node;
    node.conv.w = he_kernel<T>(rng, co, ci, k, stride, pad);
    node.conv.bias.assign(static_cast<std::size_t>(co), T(0));
    node.conv.sigma.push_back(Stage<T>::batchnorm(co));
    node.conv.sigma.push_back(Stage<T>::relu());
    return node;
}

template <class T>
NetworkGraph<T> build_resnet(const ArchSpec& spec, std::mt19937_64& rng, int blocks_per_stage) {
    const int c1 = static_cast<int>(std::floor(64.0 * spec.width_r));
    const int c2 = static_cast<int>(std::floor(128.0 * spec.width_r));
    if (c1 < 1 || c2 < 1)
        throw InvalidMultiplier("floor(64r) and floor(128r) must be >= 1, got r = " +
                                std::to_string(spec.width_r));

    NetworkGraph<T> net;
    net.input_shape = {3, 32, 32};

    // Conv1: 7x7, stride 2; the 3x3/stride-2 max pool is composed into its
    // pipeline, so stage inputs are the 8x8 pooled volume.
    LayerNode<T> conv1 = resnet_conv<T>(rng, c1, 3, 7, 2, 3);
    conv1.conv.sigma.push_back(Stage<T>::maxpool(3, 2, 1));
    net.nodes.push_back(std::move(conv1));

    auto add_stage = [&](int channels, int in_channels, bool downsample) {
        for (int b = 0; b < blocks_per_stage; ++b) {
            const bool first = b == 0;
            const int block_in = first ? in_channels : channels;
            const int src = static_cast<int>(net.nodes.size()) - 1;
            net.nodes.push_back(
                resnet_conv<T>(rng, channels, block_in, 3, first && downsample ? 2 : 1, 1));
            net.nodes.push_back(resnet_conv<T>(rng, channels, channels, 3, 1, 1));
            if (spec.residual) {
                Shortcut<T> sc;
                sc.src_node = src;
                if (first && downsample) {
                    sc.kind = ShortcutKind::Projection;
                    sc.proj = he_kernel<T>(rng, channels, block_in, 1, 2, 0);
                    sc.proj_bias.assign(static_cast<std::size_t>(channels), T(0));
                } else {
                    sc.kind = ShortcutKind::Identity;
                }
                net.nodes.back().shortcut_in = std::move(sc);
            }
        }
    };
    add_stage(c1, c1, /*downsample=*/false); // Conv2_x at 8x8, stride 1
    add_stage(c2, c1, /*downsample=*/true);  // Conv3_x at 4x4, Conv3_1 stride 2

    net.head.fc.w = he_kernel<T>(rng, 10, c2, 1, 1, 0);
    net.head.fc.bias.assign(10, T(0));
    net.rebuild_consumers();
    return net;
}

template <class T>
NetworkGraph<T> build_small_conv(std::mt19937_64& rng, int filters) {
    NetworkGraph<T> net;
    net.input_shape = {3, 32, 32};

    LayerNode<T> conv1;
    conv1.conv.w = he_kernel<T>(rng, filters, 3, 7, 1, 3);
    conv1.conv.bias.assign(static_cast<std::size_t>(filters), T(0));
    conv1.conv.sigma.push_back(Stage<T>::relu());
    conv1.conv.sigma.push_back(Stage<T>::maxpool(2, 2, 0));
    net.nodes.push_back(std::move(conv1));

    // 150-d fully-connected layer over the 16x16 volume, realized as a conv
    LayerNode<T> fc1;
    fc1.conv.w = he_kernel<T>(rng, 150, filters, 16, 1, 0);
    fc1.conv.bias.assign(150, T(0));
    fc1.conv.sigma.push_back(Stage<T>::relu());
    net.nodes.push_back(std::move(fc1));

    net.head.fc.w = he_kernel<T>(rng, 10, 150, 1, 1, 0);
    net.head.fc.bias.assign(10, T(0));
    net.rebuild_consumers();
    return net;
}

} // namespace detail

/// Builds a freshly He-initialized network for the given architecture spec.
template <class T>
NetworkGraph<T> build_arch(const ArchSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    switch (spec.family) {
        case ArchFamily::ResNetCifar10: return detail::build_resnet<T>(spec, rng, 2);
        case ArchFamily::ResNetCifar18: return detail::build_resnet<T>(spec, rng, 4);
        case ArchFamily::SmallConv: return detail::build_small_conv<T>(rng, 16);
        case ArchFamily::SmallConvWidened: return detail::build_small_conv<T>(rng, 32);
    }
    throw ConfigError("unknown architecture family");
}

} // namespace fpt

#endif
