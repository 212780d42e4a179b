#ifndef FPT_DATA_HPP
#define FPT_DATA_HPP

#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fpt/cifar_file.hpp"
#include "fpt/tensor.hpp"

namespace fpt {

/// A 3x32x32 image with values in [0,1] after decode (reals after
/// normalization) and a label in [0, 10).
template <class T>
struct LabeledImage {
    Tensor<T> image; // (3, 32, 32)
    int label = 0;
};

template <class T>
struct Dataset {
    std::vector<LabeledImage<T>> train;
    std::vector<LabeledImage<T>> val;
    std::array<T, 3> channel_mean{T(0), T(0), T(0)};
    std::array<T, 3> channel_std{T(1), T(1), T(1)};
    bool normalized = false;
};

namespace detail {

template <class T>
LabeledImage<T> decode_record(const CifarRecord& rec) {
    LabeledImage<T> img;
    img.label = rec.label;
    img.image = Tensor<T>({3, 32, 32});
    for (std::size_t i = 0; i < rec.pixels.size(); ++i)
        img.image.data[i] = static_cast<T>(rec.pixels[i]) / T(255);
    return img;
}

} // namespace detail

/// Loads the CIFAR-10 binary dataset: train = data_batch_{1..5}.bin,
/// val = test_batch.bin.
template <class T>
Dataset<T> load_cifar10(const std::string& dir) {
    Dataset<T> ds;
    for (int i = 1; i <= 5; ++i) {
        const auto records = read_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin");
        for (const auto& r : records) ds.train.push_back(detail::decode_record<T>(r));
    }
    for (const auto& r : read_cifar_file(dir + "/test_batch.bin"))
        ds.val.push_back(detail::decode_record<T>(r));
    return ds;
}

/// Per-channel (x - mean) / std over both splits, statistics computed from the
/// train split only.
template <class T>
void color_normalize(Dataset<T>& ds) {
    if (ds.train.empty()) throw ZeroStd("cannot normalize an empty train split");
    std::array<double, 3> sum{}, sq{};
    const long long per_channel =
        static_cast<long long>(ds.train.size()) * 32 * 32;
    for (const auto& img : ds.train)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const double v = static_cast<double>(img.image(c, y, x));
                    sum[static_cast<std::size_t>(c)] += v;
                    sq[static_cast<std::size_t>(c)] += v * v;
                }
    std::array<T, 3> mean, stddev;
    for (int c = 0; c < 3; ++c) {
        const double m = sum[static_cast<std::size_t>(c)] / static_cast<double>(per_channel);
        const double var = sq[static_cast<std::size_t>(c)] / static_cast<double>(per_channel) - m * m;
        if (var <= 0) throw ZeroStd("channel " + std::to_string(c) + " is constant");
        mean[static_cast<std::size_t>(c)] = static_cast<T>(m);
        stddev[static_cast<std::size_t>(c)] = static_cast<T>(std::sqrt(var));
    }
    auto apply = [&](std::vector<LabeledImage<T>>& split) {
        for (auto& img : split)
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < 32; ++y)
                    for (int x = 0; x < 32; ++x)
                        img.image(c, y, x) = (img.image(c, y, x) - mean[static_cast<std::size_t>(c)]) /
                                             stddev[static_cast<std::size_t>(c)];
    };
    apply(ds.train);
    apply(ds.val);
    ds.channel_mean = mean;
    ds.channel_std = stddev;
    ds.normalized = true;
}

/// Class-conditional Gaussian-blob images: each class has fixed per-channel
/// means; difficulty shrinks the class separation and grows per-image jitter
/// and pixel noise. Deterministic under the seed, labels balanced.
template <class T>
Dataset<T> synthetic_dataset(std::uint64_t seed, int n, int classes, double difficulty) {
    if (classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (n < classes) throw ConfigError("synthetic dataset needs n >= classes");
    std::mt19937_64 rng(seed);
    const double sep = 0.35 * (1.0 - 0.7 * difficulty);
    const double jitter = 0.02 + 0.25 * difficulty;
    const double pixel_noise = 0.05 + 0.2 * difficulty;
    std::normal_distribution<double> jit(0.0, jitter);
    std::normal_distribution<double> noise(0.0, pixel_noise);

    auto class_mean = [&](int k, int c) {
        return 0.5 + sep * std::cos(2.0 * M_PI * (static_cast<double>(k) / classes +
                                                  static_cast<double>(c) / 3.0));
    };
    auto gen_split = [&](int count) {
        std::vector<LabeledImage<T>> split;
        split.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            LabeledImage<T> img;
            img.label = i % classes;
            img.image = Tensor<T>({3, 32, 32});
            for (int c = 0; c < 3; ++c) {
                const double mu = class_mean(img.label, c) + jit(rng);
                for (int y = 0; y < 32; ++y)
                    for (int x = 0; x < 32; ++x)
                        img.image(c, y, x) = static_cast<T>(mu + noise(rng));
            }
            split.push_back(std::move(img));
        }
        return split;
    };

    Dataset<T> ds;
    ds.train = gen_split(n);
    ds.val = gen_split(std::max(classes, n / 5));
    return ds;
}

/// Assembles images at `indices` of a split into an (N,3,32,32) batch.
template <class T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const std::vector<LabeledImage<T>>& split,
                                                  const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ConfigError("cannot make an empty batch");
    const auto& first = split[indices[0]].image;
    Tensor<T> batch({static_cast<int>(indices.size()), first.extent(0), first.extent(1),
                     first.extent(2)});
    std::vector<int> labels(indices.size());
    const std::size_t stride = first.numel();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& img = split[indices[i]];
        std::copy(img.image.data.begin(), img.image.data.end(),
                  batch.data.begin() + static_cast<std::ptrdiff_t>(i * stride));
        labels[i] = img.label;
    }
    return {std::move(batch), std::move(labels)};
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(idx[i - 1], idx[pick(rng)]);
    }
    return idx;
}

} // namespace fpt

#endif
