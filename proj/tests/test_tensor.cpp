#include "doctest.h"

#include <random>

#include "fpt/tensor.hpp"
#include "test_support.hpp"

using namespace fpt;
using fpt::testing::random_kernel;
using fpt::testing::random_tensor;

namespace {

/// Independent six-nested-loop cross-correlation reference, same accumulation
/// order as the production path (ascending channel, then kernel row/column).
template <class T>
Tensor<T> conv_reference(const Kernel4<T>& W, const Tensor<T>& x) {
    const int h = x.extent(1), w = x.extent(2);
    const int ho = (h + 2 * W.padding - W.kh()) / W.stride + 1;
    const int wo = (w + 2 * W.padding - W.kw()) / W.stride + 1;
    Tensor<T> out({W.out_channels(), ho, wo});
    for (int o = 0; o < W.out_channels(); ++o)
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                T acc = 0;
                for (int m = 0; m < W.in_channels(); ++m)
                    for (int r = 0; r < W.kh(); ++r)
                        for (int c = 0; c < W.kw(); ++c) {
                            const int iy = oy * W.stride - W.padding + r;
                            const int ix = ox * W.stride - W.padding + c;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += W.w(o, m, r, c) * x(m, iy, ix);
                        }
                out(o, oy, ox) = acc;
            }
    return out;
}

} // namespace

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor<double>({2, 0}), ShapeMismatch);
    CHECK_THROWS_AS(Tensor<double>({2, 2}, {1.0, 2.0, 3.0}), ShapeMismatch);
    Tensor<double> t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.data.size() == 6);
}

TEST_CASE("conv2d scalar scaling and identity") {
    Kernel4<double> two(Tensor<double>({1, 1, 1, 1}, {2.0}), 1, 0);
    Tensor<double> x({1, 2, 2}, {1, 2, 3, 4});
    auto y = conv2d(two, x);
    CHECK(y.shape == std::vector<int>{1, 2, 2});
    CHECK(y.data == std::vector<double>{2, 4, 6, 8});

    Kernel4<double> one(Tensor<double>({1, 1, 1, 1}, {1.0}), 1, 0);
    auto same = conv2d(one, x);
    CHECK(same.data == x.data);
}

TEST_CASE("conv2d matches the nested-loop reference exactly") {
    std::mt19937_64 rng(11);
    auto W = random_kernel<double>(rng, 4, 3, 3, 1, 1);
    auto x = random_tensor<double>(rng, {3, 8, 8});
    auto got = conv2d(W, x);
    auto want = conv_reference(W, x);
    CHECK(got.shape == want.shape);
    for (std::size_t i = 0; i < got.data.size(); ++i) CHECK(got.data[i] == want.data[i]);

    auto wf = random_kernel<float>(rng, 2, 5, 3, 2, 1);
    auto xf = random_tensor<float>(rng, {5, 9, 9});
    auto gotf = conv2d(wf, xf);
    auto wantf = conv_reference(wf, xf);
    for (std::size_t i = 0; i < gotf.data.size(); ++i) CHECK(gotf.data[i] == wantf.data[i]);
}

TEST_CASE("conv2d errors") {
    std::mt19937_64 rng(3);
    auto W = random_kernel<double>(rng, 2, 3, 3);
    CHECK_THROWS_AS(conv2d(W, random_tensor<double>(rng, {4, 6, 6})), ChannelMismatch);
    Kernel4<double> big(random_tensor<double>(rng, {1, 1, 5, 5}), 1, 0);
    CHECK_THROWS_AS(conv2d(big, random_tensor<double>(rng, {1, 3, 3})), DegenerateOutput);
}

TEST_CASE("conv2d reduces to matrix multiplication at k=h=w=1") {
    std::mt19937_64 rng(5);
    auto W = random_kernel<double>(rng, 4, 6, 1, 1, 0);
    auto x = random_tensor<double>(rng, {6, 1, 1});
    auto y = conv2d(W, x);
    for (int o = 0; o < 4; ++o) {
        double acc = 0;
        for (int m = 0; m < 6; ++m) acc += W.w(o, m, 0, 0) * x(m, 0, 0);
        CHECK(y(o, 0, 0) == acc);
    }
}

TEST_CASE("kernel_vstack block law") {
    std::mt19937_64 rng(7);
    auto A = random_kernel<double>(rng, 2, 3, 3, 1, 1);
    auto B = random_kernel<double>(rng, 3, 3, 3, 1, 1);
    auto x = random_tensor<double>(rng, {3, 6, 6});

    auto single = kernel_vstack<double>({A});
    CHECK(single.w.data == A.w.data);

    auto stacked = kernel_vstack<double>({A, B});
    CHECK(stacked.out_channels() == 5);
    auto lhs = conv2d(stacked, x);
    auto rhs = channel_concat(conv2d(A, x), conv2d(B, x));
    // disjoint output rows: bitwise
    CHECK(lhs.data == rhs.data);

    CHECK_THROWS_AS(kernel_vstack(std::span<const Kernel4<double>>{}), ShapeMismatch);
    auto C = random_kernel<double>(rng, 2, 4, 3, 1, 1);
    CHECK_THROWS_AS(kernel_vstack<double>({A, C}), ShapeMismatch);
}

TEST_CASE("kernel_hstack block law") {
    std::mt19937_64 rng(9);
    auto A = random_kernel<double>(rng, 4, 2, 3, 1, 1);
    auto B = random_kernel<double>(rng, 4, 2, 3, 1, 1);
    auto a = random_tensor<double>(rng, {2, 8, 8});
    auto b = random_tensor<double>(rng, {2, 8, 8});

    auto single = kernel_hstack<double>({A});
    CHECK(single.w.data == A.w.data);

    auto stacked = kernel_hstack<double>({A, B});
    CHECK(stacked.in_channels() == 4);
    auto lhs = conv2d(stacked, channel_concat(a, b));
    auto sa = conv2d(A, a), sb = conv2d(B, b);
    // the right-hand side rounds each part before the final add, so the law
    // holds to accumulation roundoff rather than bitwise
    for (std::size_t i = 0; i < lhs.data.size(); ++i)
        CHECK(fpt::testing::rel_err(lhs.data[i], sa.data[i] + sb.data[i], 1.0) < 1e-14);

    Kernel4<double> bad(random_tensor<double>(rng, {4, 2, 5, 5}), 1, 1);
    CHECK_THROWS_AS(kernel_hstack<double>({A, bad}), ShapeMismatch);
}

TEST_CASE("conv2d is linear in x") {
    std::mt19937_64 rng(13);
    auto W64 = random_kernel<double>(rng, 3, 4, 3, 1, 1);
    auto x = random_tensor<double>(rng, {4, 6, 6});
    auto y = random_tensor<double>(rng, {4, 6, 6});
    const double alpha = 0.7, beta = -1.3;
    Tensor<double> mix({4, 6, 6});
    for (std::size_t i = 0; i < mix.data.size(); ++i)
        mix.data[i] = alpha * x.data[i] + beta * y.data[i];
    auto lhs = conv2d(W64, mix);
    auto cx = conv2d(W64, x), cy = conv2d(W64, y);
    for (std::size_t i = 0; i < lhs.data.size(); ++i)
        CHECK(fpt::testing::rel_err(lhs.data[i], alpha * cx.data[i] + beta * cy.data[i], 1.0) <
              1e-12);

    auto W32 = random_kernel<float>(rng, 3, 4, 3, 1, 1);
    auto xf = random_tensor<float>(rng, {4, 6, 6});
    auto yf = random_tensor<float>(rng, {4, 6, 6});
    Tensor<float> mixf({4, 6, 6});
    for (std::size_t i = 0; i < mixf.data.size(); ++i)
        mixf.data[i] = 0.7f * xf.data[i] - 1.3f * yf.data[i];
    auto lf = conv2d(W32, mixf);
    auto cxf = conv2d(W32, xf), cyf = conv2d(W32, yf);
    for (std::size_t i = 0; i < lf.data.size(); ++i)
        CHECK(fpt::testing::rel_err(lf.data[i], 0.7f * cxf.data[i] - 1.3f * cyf.data[i], 1.0f) <
              1e-5f);
}

TEST_CASE("tensor_stats") {
    Tensor<double> pair({2}, {1.0, -1.0});
    auto [m1, s1] = tensor_stats(pair);
    CHECK(m1 == 0.0);
    CHECK(s1 == 1.0);

    Tensor<double> zeros({3, 4});
    auto [m2, s2] = tensor_stats(zeros);
    CHECK(m2 == 0.0);
    CHECK(s2 == 0.0);

    // streaming (Welford) reference
    std::mt19937_64 rng(17);
    auto t = random_tensor<double>(rng, {100});
    double mean = 0, m2acc = 0;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        const double d = t.data[i] - mean;
        mean += d / static_cast<double>(i + 1);
        m2acc += d * (t.data[i] - mean);
    }
    const double ref_std = std::sqrt(m2acc / static_cast<double>(t.data.size()));
    auto [m3, s3] = tensor_stats(t);
    CHECK(fpt::testing::rel_err(m3, mean, 1e-9) < 1e-12);
    CHECK(fpt::testing::rel_err(s3, ref_std, 1e-9) < 1e-12);
}

TEST_CASE("canonical_sum cancels exact +/- pairs and ignores order") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> d(-2, 2);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> base(20);
        for (auto& v : base) v = d(rng);
        std::vector<double> with_pairs = base;
        std::vector<double> pairs(6);
        for (auto& p : pairs) p = d(rng);
        // interleave pairs at random positions
        for (double p : pairs) {
            with_pairs.insert(with_pairs.begin() + static_cast<std::ptrdiff_t>(
                                                       rng() % (with_pairs.size() + 1)),
                              p);
            with_pairs.insert(with_pairs.begin() + static_cast<std::ptrdiff_t>(
                                                       rng() % (with_pairs.size() + 1)),
                              -p);
        }
        std::vector<double> a = base, b = with_pairs;
        const double sa = canonical_sum(a);
        const double sb = canonical_sum(b);
        CHECK(sa == sb);

        std::vector<double> shuffled = base;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const double sc = canonical_sum(shuffled);
        CHECK(sa == sc);
    }
}

TEST_CASE("exact-mode conv agrees with sequential mode to roundoff") {
    std::mt19937_64 rng(29);
    auto W = random_kernel<double>(rng, 3, 4, 3, 1, 1);
    auto x = random_tensor<double>(rng, {4, 7, 7});
    auto seq = conv2d(W, x, SumMode::Sequential);
    auto ex = conv2d(W, x, SumMode::Exact);
    for (std::size_t i = 0; i < seq.data.size(); ++i)
        CHECK(fpt::testing::rel_err(seq.data[i], ex.data[i], 1.0) < 1e-13);
}
