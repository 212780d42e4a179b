#ifndef FPT_TENSOR_HPP
#define FPT_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fpt/errors.hpp"

namespace fpt {

/// Dense row-major N-dimensional array. The single value carrier for kernels,
/// activations and gradients. Element type is float or double, uniform per run.
template <class T>
struct Tensor {
    static_assert(std::is_floating_point_v<T>);

    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(checked_numel(shape), T(0));
    }

    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (checked_numel(shape) != data.size())
            throw ShapeMismatch("tensor data length does not match shape product");
    }

    static std::size_t checked_numel(const std::vector<int>& s) {
        if (s.empty()) throw ShapeMismatch("tensor shape must have at least one extent");
        std::size_t n = 1;
        for (int e : s) {
            if (e < 1) throw ShapeMismatch("tensor extents must be >= 1");
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    std::size_t numel() const { return data.size(); }
    int extent(int i) const { return shape[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    T& operator()(int a) { return data[static_cast<std::size_t>(a)]; }
    T operator()(int a) const { return data[static_cast<std::size_t>(a)]; }

    T& operator()(int a, int b) { return data[idx2(a, b)]; }
    T operator()(int a, int b) const { return data[idx2(a, b)]; }

    T& operator()(int a, int b, int c) { return data[idx3(a, b, c)]; }
    T operator()(int a, int b, int c) const { return data[idx3(a, b, c)]; }

    T& operator()(int a, int b, int c, int d) { return data[idx4(a, b, c, d)]; }
    T operator()(int a, int b, int c, int d) const { return data[idx4(a, b, c, d)]; }

    std::size_t idx2(int a, int b) const {
        return (static_cast<std::size_t>(a) * shape[1]) + b;
    }
    std::size_t idx3(int a, int b, int c) const {
        return ((static_cast<std::size_t>(a) * shape[1]) + b) * shape[2] + c;
    }
    std::size_t idx4(int a, int b, int c, int d) const {
        return (((static_cast<std::size_t>(a) * shape[1]) + b) * shape[2] + c) * shape[3] + d;
    }
};

template <class T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeMismatch(std::string(what) + ": expected rank " + std::to_string(rank) +
                            ", got " + std::to_string(t.rank()));
}

/// Summation strategy for reductions whose term multisets change under a morph.
/// Sequential: plain ascending-index accumulation (fast path, used for training).
/// Exact: canonical multiset summation; exact +/- term pairs cancel before touching
/// the accumulator, so the result depends only on the multiset of terms. This is
/// the mode under which R2R transforms preserve outputs exactly.
enum class SumMode { Sequential, Exact };

/// Sums `terms` so that the result is a function of the term multiset alone:
/// zeros are dropped, exact +/- pairs cancel, the residue is accumulated in
/// ascending magnitude order. Destroys the input vector's order.
template <class T>
T canonical_sum(std::vector<T>& terms) {
    auto keep = std::remove_if(terms.begin(), terms.end(), [](T v) { return v == T(0); });
    terms.erase(keep, terms.end());
    std::sort(terms.begin(), terms.end(), [](T a, T b) {
        T fa = std::fabs(a), fb = std::fabs(b);
        if (fa != fb) return fa < fb;
        return a < b; // negative twin first within one magnitude
    });
    T acc = T(0);
    std::size_t i = 0;
    const std::size_t n = terms.size();
    while (i < n) {
        const T mag = std::fabs(terms[i]);
        if (std::isnan(mag)) { acc += terms[i]; ++i; continue; }
        std::size_t neg = 0, pos = 0;
        while (i < n && std::fabs(terms[i]) == mag) {
            if (terms[i] < T(0)) ++neg; else ++pos;
            ++i;
        }
        const std::size_t residue = neg < pos ? pos - neg : neg - pos;
        const T signed_mag = pos >= neg ? mag : -mag;
        for (std::size_t k = 0; k < residue; ++k) acc += signed_mag;
    }
    return acc;
}

/// 2-D convolution kernel plus its application geometry. Shape is
/// (C_out, C_in, k_h, k_w); dilation is fixed at 1.
template <class T>
struct Kernel4 {
    Tensor<T> w;
    int stride = 1;
    int padding = 0;

    Kernel4() = default;
    Kernel4(Tensor<T> weights, int stride_, int padding_)
        : w(std::move(weights)), stride(stride_), padding(padding_) {
        check();
    }

    void check() const {
        require_rank(w, 4, "kernel");
        if (stride < 1) throw ShapeMismatch("kernel stride must be >= 1");
        if (padding < 0) throw ShapeMismatch("kernel padding must be >= 0");
    }

    int out_channels() const { return w.extent(0); }
    int in_channels() const { return w.extent(1); }
    int kh() const { return w.extent(2); }
    int kw() const { return w.extent(3); }
};

inline int conv_out_extent(int in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

/// Single-volume cross-correlation: out[o] = sum_m W[o,m] * x[m].
/// x has shape (C_in, h, w); result has shape (C_out, h_out, w_out).
/// Sequential accumulation order is ascending channel, then kernel row, then
/// kernel column, per output element.
template <class T>
Tensor<T> conv2d(const Kernel4<T>& W, const Tensor<T>& x, SumMode mode = SumMode::Sequential) {
    require_rank(x, 3, "conv input");
    if (x.extent(0) != W.in_channels())
        throw ChannelMismatch("conv input has " + std::to_string(x.extent(0)) +
                              " channels, kernel expects " + std::to_string(W.in_channels()));
    const int h = x.extent(1), w = x.extent(2);
    const int ho = conv_out_extent(h, W.kh(), W.stride, W.padding);
    const int wo = conv_out_extent(w, W.kw(), W.stride, W.padding);
    if (ho < 1 || wo < 1)
        throw DegenerateOutput("conv output extent < 1 (" + std::to_string(ho) + "x" +
                               std::to_string(wo) + ")");

    Tensor<T> out({W.out_channels(), ho, wo});
    const int ci = W.in_channels(), kh = W.kh(), kw = W.kw();
    const int stride = W.stride, pad = W.padding;
    std::vector<T> terms;
    for (int o = 0; o < W.out_channels(); ++o) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                if (mode == SumMode::Sequential) {
                    T acc = T(0);
                    for (int m = 0; m < ci; ++m) {
                        for (int r = 0; r < kh; ++r) {
                            const int iy = oy * stride - pad + r;
                            if (iy < 0 || iy >= h) continue;
                            for (int c = 0; c < kw; ++c) {
                                const int ix = ox * stride - pad + c;
                                if (ix < 0 || ix >= w) continue;
                                acc += W.w(o, m, r, c) * x(m, iy, ix);
                            }
                        }
                    }
                    out(o, oy, ox) = acc;
                } else {
                    terms.clear();
                    for (int m = 0; m < ci; ++m) {
                        for (int r = 0; r < kh; ++r) {
                            const int iy = oy * stride - pad + r;
                            if (iy < 0 || iy >= h) continue;
                            for (int c = 0; c < kw; ++c) {
                                const int ix = ox * stride - pad + c;
                                if (ix < 0 || ix >= w) continue;
                                terms.push_back(W.w(o, m, r, c) * x(m, iy, ix));
                            }
                        }
                    }
                    out(o, oy, ox) = canonical_sum(terms);
                }
            }
        }
    }
    return out;
}

namespace detail {

template <class T>
void require_same_geometry(const Kernel4<T>& a, const Kernel4<T>& b) {
    if (a.kh() != b.kh() || a.kw() != b.kw())
        throw ShapeMismatch("stacked kernels disagree on kernel size");
    if (a.stride != b.stride || a.padding != b.padding)
        throw ShapeMismatch("stacked kernels disagree on stride/padding");
}

} // namespace detail

/// Stacks kernels along the output-channel axis. All parts must share
/// (C_in, k_h, k_w, stride, padding).
template <class T>
Kernel4<T> kernel_vstack(std::span<const Kernel4<T>> parts) {
    if (parts.empty()) throw ShapeMismatch("kernel_vstack of zero parts");
    int co = 0;
    for (const auto& p : parts) {
        detail::require_same_geometry(parts[0], p);
        if (p.in_channels() != parts[0].in_channels())
            throw ShapeMismatch("kernel_vstack parts disagree on input channels");
        co += p.out_channels();
    }
    Tensor<T> out({co, parts[0].in_channels(), parts[0].kh(), parts[0].kw()});
    auto dst = out.data.begin();
    for (const auto& p : parts) dst = std::copy(p.w.data.begin(), p.w.data.end(), dst);
    return Kernel4<T>(std::move(out), parts[0].stride, parts[0].padding);
}

template <class T>
Kernel4<T> kernel_vstack(std::initializer_list<Kernel4<T>> parts) {
    std::vector<Kernel4<T>> v(parts);
    return kernel_vstack(std::span<const Kernel4<T>>(v));
}

/// Stacks kernels along the input-channel axis. All parts must share
/// (C_out, k_h, k_w, stride, padding).
template <class T>
Kernel4<T> kernel_hstack(std::span<const Kernel4<T>> parts) {
    if (parts.empty()) throw ShapeMismatch("kernel_hstack of zero parts");
    int ci = 0;
    for (const auto& p : parts) {
        detail::require_same_geometry(parts[0], p);
        if (p.out_channels() != parts[0].out_channels())
            throw ShapeMismatch("kernel_hstack parts disagree on output channels");
        ci += p.in_channels();
    }
    const int co = parts[0].out_channels(), kh = parts[0].kh(), kw = parts[0].kw();
    Tensor<T> out({co, ci, kh, kw});
    for (int o = 0; o < co; ++o) {
        int base = 0;
        for (const auto& p : parts) {
            for (int m = 0; m < p.in_channels(); ++m)
                for (int r = 0; r < kh; ++r)
                    for (int c = 0; c < kw; ++c)
                        out(o, base + m, r, c) = p.w(o, m, r, c);
            base += p.in_channels();
        }
    }
    return Kernel4<T>(std::move(out), parts[0].stride, parts[0].padding);
}

template <class T>
Kernel4<T> kernel_hstack(std::initializer_list<Kernel4<T>> parts) {
    std::vector<Kernel4<T>> v(parts);
    return kernel_hstack(std::span<const Kernel4<T>>(v));
}

/// Negated copy of a kernel (same geometry).
template <class T>
Kernel4<T> kernel_negate(const Kernel4<T>& k) {
    Kernel4<T> out = k;
    for (auto& v : out.w.data) v = -v;
    return out;
}

/// Mean and population standard deviation (divide by N) over all elements.
template <class T>
std::pair<T, T> tensor_stats(const Tensor<T>& t) {
    if (t.data.empty()) throw ShapeMismatch("tensor_stats of empty tensor");
    T sum = T(0);
    for (T v : t.data) sum += v;
    const T mean = sum / static_cast<T>(t.data.size());
    T sq = T(0);
    for (T v : t.data) sq += (v - mean) * (v - mean);
    const T stddev = std::sqrt(sq / static_cast<T>(t.data.size()));
    return {mean, stddev};
}

/// Concatenates volumes (C,h,w) along the channel axis.
template <class T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 3, "channel_concat");
    require_rank(b, 3, "channel_concat");
    if (a.extent(1) != b.extent(1) || a.extent(2) != b.extent(2))
        throw ShapeMismatch("channel_concat spatial extents differ");
    Tensor<T> out({a.extent(0) + b.extent(0), a.extent(1), a.extent(2)});
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.numel()));
    return out;
}

} // namespace fpt

#endif
