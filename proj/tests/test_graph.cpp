#include "doctest.h"

#include <random>

#include "fpt/arch.hpp"
#include "fpt/graph.hpp"
#include "fpt/serialize.hpp"
#include "test_support.hpp"

using namespace fpt;
using fpt::testing::attach_head;
using fpt::testing::conv_node;
using fpt::testing::max_abs_diff;
using fpt::testing::random_kernel;
using fpt::testing::random_tensor;

namespace {

// ---------------------------------------------------------------------------
// Independent node-by-node interpreter, used as the forward oracle. Follows
// the documented evaluation semantics (ascending-index accumulation, stage
// order, batch statistics per channel, first-maximal pooling) with its own
// loop code.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> oracle_conv(const Kernel4<T>& k, const Tensor<T>& x, const std::vector<T>& bias) {
    const int n = x.extent(0), h = x.extent(2), w = x.extent(3);
    const int ho = (h + 2 * k.padding - k.kh()) / k.stride + 1;
    const int wo = (w + 2 * k.padding - k.kw()) / k.stride + 1;
    Tensor<T> y({n, k.out_channels(), ho, wo});
    for (int b = 0; b < n; ++b)
        for (int o = 0; o < k.out_channels(); ++o)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    T acc = 0;
                    for (int m = 0; m < k.in_channels(); ++m)
                        for (int r = 0; r < k.kh(); ++r)
                            for (int c = 0; c < k.kw(); ++c) {
                                const int iy = oy * k.stride - k.padding + r;
                                const int ix = ox * k.stride - k.padding + c;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += k.w(o, m, r, c) * x(b, m, iy, ix);
                            }
                    y(b, o, oy, ox) = acc + bias[static_cast<std::size_t>(o)];
                }
    return y;
}

template <class T>
Tensor<T> oracle_stage(const Stage<T>& st, const Tensor<T>& x) {
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    switch (st.kind) {
        case StageKind::Identity:
            return x;
        case StageKind::ReLU: {
            Tensor<T> y = x;
            for (auto& v : y.data)
                if (v < T(0)) v = T(0);
            return y;
        }
        case StageKind::BatchNorm: {
            Tensor<T> y(x.shape);
            const T count = static_cast<T>(static_cast<long long>(n) * h * w);
            for (int ch = 0; ch < c; ++ch) {
                T mu, var;
                if (st.bn_train) {
                    T sum = 0;
                    for (int b = 0; b < n; ++b)
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < w; ++xx) sum += x(b, ch, yy, xx);
                    mu = sum / count;
                    T sq = 0;
                    for (int b = 0; b < n; ++b)
                        for (int yy = 0; yy < h; ++yy)
                            for (int xx = 0; xx < w; ++xx) {
                                const T dd = x(b, ch, yy, xx) - mu;
                                sq += dd * dd;
                            }
                    var = sq / count;
                } else {
                    mu = st.running_mean[static_cast<std::size_t>(ch)];
                    var = st.running_var[static_cast<std::size_t>(ch)];
                }
                const T inv = T(1) / std::sqrt(var + st.bn_epsilon);
                for (int b = 0; b < n; ++b)
                    for (int yy = 0; yy < h; ++yy)
                        for (int xx = 0; xx < w; ++xx)
                            y(b, ch, yy, xx) = st.gamma[static_cast<std::size_t>(ch)] *
                                                   ((x(b, ch, yy, xx) - mu) * inv) +
                                               st.beta[static_cast<std::size_t>(ch)];
            }
            return y;
        }
        case StageKind::MaxPool:
        case StageKind::AvgPool: {
            const int ho = (h + 2 * st.pool_pad - st.pool_k) / st.pool_stride + 1;
            const int wo = (w + 2 * st.pool_pad - st.pool_k) / st.pool_stride + 1;
            Tensor<T> y({n, c, ho, wo});
            for (int b = 0; b < n; ++b)
                for (int ch = 0; ch < c; ++ch)
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox) {
                            bool seen = false;
                            T best = 0, sum = 0;
                            for (int r = 0; r < st.pool_k; ++r)
                                for (int cc = 0; cc < st.pool_k; ++cc) {
                                    const int iy = oy * st.pool_stride - st.pool_pad + r;
                                    const int ix = ox * st.pool_stride - st.pool_pad + cc;
                                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                    const T v = x(b, ch, iy, ix);
                                    if (!seen || v > best) best = v;
                                    seen = true;
                                    sum += v;
                                }
                            y(b, ch, oy, ox) = st.kind == StageKind::MaxPool
                                                   ? best
                                                   : sum / (static_cast<T>(st.pool_k) *
                                                            static_cast<T>(st.pool_k));
                        }
            return y;
        }
    }
    throw std::logic_error("stage");
}

template <class T>
Tensor<T> oracle_forward_logits(const NetworkGraph<T>& net, const Tensor<T>& batch) {
    std::vector<Tensor<T>> outs;
    const Tensor<T>* cur = &batch;
    for (const auto& node : net.nodes) {
        Tensor<T> f = oracle_conv(node.conv.w, *cur, node.conv.bias);
        for (const auto& st : node.conv.sigma) f = oracle_stage(st, f);
        if (node.shortcut_in) {
            const auto& sc = *node.shortcut_in;
            const Tensor<T>& src = outs[static_cast<std::size_t>(sc.src_node)];
            Tensor<T> raw;
            if (sc.kind == ShortcutKind::Identity) {
                raw = src;
            } else if (sc.kind == ShortcutKind::ZeroPad) {
                raw = Tensor<T>({src.extent(0), sc.zeropad_channels, src.extent(2), src.extent(3)});
                for (int b = 0; b < src.extent(0); ++b)
                    for (int ch = 0; ch < src.extent(1); ++ch)
                        for (int yy = 0; yy < src.extent(2); ++yy)
                            for (int xx = 0; xx < src.extent(3); ++xx)
                                raw(b, ch, yy, xx) = src(b, ch, yy, xx);
            } else {
                raw = oracle_conv(sc.proj, src, sc.proj_bias);
            }
            Tensor<T> add = raw;
            if (sc.has_fold()) {
                add = Tensor<T>({raw.extent(0), static_cast<int>(sc.fold.size()), raw.extent(2),
                                 raw.extent(3)});
                for (int b = 0; b < raw.extent(0); ++b)
                    for (std::size_t ch = 0; ch < sc.fold.size(); ++ch)
                        for (int yy = 0; yy < raw.extent(2); ++yy)
                            for (int xx = 0; xx < raw.extent(3); ++xx) {
                                T acc = 0;
                                for (const auto& e : sc.fold[ch]) {
                                    const T v = raw(b, e.src, yy, xx);
                                    acc += e.sign >= 0 ? v : -v;
                                }
                                add(b, static_cast<int>(ch), yy, xx) = acc;
                            }
            }
            for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] += add.data[i];
        }
        outs.push_back(std::move(f));
        cur = &outs.back();
    }
    const Tensor<T>& last = outs.back();
    const int n = last.extent(0), c = last.extent(1), h = last.extent(2), w = last.extent(3);
    Tensor<T> pooled({n, c, 1, 1});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            T sum = 0;
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) sum += last(b, ch, yy, xx);
            pooled(b, ch, 0, 0) = sum / static_cast<T>(static_cast<long long>(h) * w);
        }
    Tensor<T> pre = oracle_conv(net.head.fc.w, pooled, net.head.fc.bias);
    Tensor<T> logits({n, pre.extent(1)});
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < pre.extent(1); ++ch) logits(b, ch) = pre(b, ch, 0, 0);
    return logits;
}

} // namespace

TEST_CASE("layer_forward identity layer") {
    Tensor<double> eye({2, 2, 1, 1});
    eye(0, 0, 0, 0) = 1;
    eye(1, 1, 0, 0) = 1;
    ConvLayer<double> layer;
    layer.w = Kernel4<double>(std::move(eye), 1, 0);
    layer.bias = {0, 0};
    std::mt19937_64 rng(1);
    auto x = random_tensor<double>(rng, {2, 5, 5});
    auto y = layer_forward(layer, x);
    CHECK(y.data == x.data);
}

TEST_CASE("layer_forward negative pre-activation under ReLU is zero") {
    ConvLayer<double> layer;
    layer.w = Kernel4<double>(Tensor<double>({3, 2, 3, 3}), 1, 1); // zero kernel
    layer.bias = {-1, -1, -1};
    layer.sigma.push_back(Stage<double>::relu());
    std::mt19937_64 rng(2);
    auto x = random_tensor<double>(rng, {2, 4, 4});
    auto y = layer_forward(layer, x);
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("layer_forward with train-mode BatchNorm matches a per-channel reference") {
    std::mt19937_64 rng(3);
    auto node = conv_node<double>(rng, 3, 2, 3, true, true);
    for (auto& g : node.conv.sigma[0].gamma) g = 1.3;
    for (auto& b : node.conv.sigma[0].beta) b = -0.2;
    auto batch = random_tensor<double>(rng, {4, 2, 6, 6});
    auto got = layer_forward(node.conv, batch);

    // reference: conv, explicit batch statistics, then relu
    auto pre = oracle_conv(node.conv.w, batch, node.conv.bias);
    auto bn = oracle_stage(node.conv.sigma[0], pre);
    auto ref = oracle_stage(node.conv.sigma[1], bn);
    CHECK(max_abs_diff(got, ref) < 1e-5);
}

TEST_CASE("forward pass-through: identity net computes channel means") {
    NetworkGraph<double> net;
    net.input_shape = {3, 4, 4};
    Tensor<double> eye({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) eye(c, c, 0, 0) = 1;
    LayerNode<double> n0;
    n0.conv.w = Kernel4<double>(eye, 1, 0);
    n0.conv.bias = {0, 0, 0};
    net.nodes.push_back(n0);
    Tensor<double> head_eye({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) head_eye(c, c, 0, 0) = 1;
    net.head.fc.w = Kernel4<double>(head_eye, 1, 0);
    net.head.fc.bias = {0, 0, 0};
    net.rebuild_consumers();

    std::mt19937_64 rng(4);
    auto batch = random_tensor<double>(rng, {2, 3, 4, 4});
    auto res = forward(net, batch);
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c) {
            double sum = 0;
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) sum += batch(b, c, y, x);
            CHECK(res.logits(b, c) == doctest::Approx(sum / 16.0).epsilon(1e-12));
        }
}

TEST_CASE("forward zero residual branch carries the shortcut") {
    std::mt19937_64 rng(5);
    NetworkGraph<double> one;
    one.input_shape = {2, 5, 5};
    one.nodes.push_back(conv_node<double>(rng, 3, 2, 3, false, true));
    attach_head(one, rng, 3, 4);

    NetworkGraph<double> two = one;
    LayerNode<double> dead;
    dead.conv.w = Kernel4<double>(Tensor<double>({3, 3, 3, 3}), 1, 1); // zero kernel
    dead.conv.bias = {0, 0, 0};
    Shortcut<double> sc;
    sc.kind = ShortcutKind::Identity;
    sc.src_node = 0;
    dead.shortcut_in = sc;
    two.nodes.push_back(dead);
    two.rebuild_consumers();

    auto batch = random_tensor<double>(rng, {3, 2, 5, 5});
    auto r1 = forward(one, batch);
    auto r2 = forward(two, batch);
    CHECK(r1.logits.data == r2.logits.data);
}

TEST_CASE("forward matches the independent interpreter on ResNetCifar-10(1/8)") {
    ArchSpec spec;
    spec.family = ArchFamily::ResNetCifar10;
    spec.width_r = 0.125;
    auto net = build_arch<double>(spec, 42);
    std::mt19937_64 rng(6);
    auto batch = random_tensor<double>(rng, {2, 3, 32, 32});
    auto got = forward(net, batch);
    auto want = oracle_forward_logits(net, batch);
    CHECK(got.logits.data == want.data);
}

TEST_CASE("validate_graph") {
    ArchSpec spec;
    spec.family = ArchFamily::ResNetCifar18;
    spec.width_r = 0.125;
    auto net = build_arch<double>(spec, 1);
    CHECK(validate_graph(net).empty());

    auto cyclic = net;
    cyclic.nodes[2].shortcut_in->src_node = 5; // source after destination
    cyclic.rebuild_consumers();
    auto v1 = validate_graph(cyclic);
    CHECK(!v1.empty());

    auto badbias = net;
    badbias.nodes[1].conv.bias.pop_back();
    auto v2 = validate_graph(badbias);
    CHECK(!v2.empty());

    auto stale = net;
    stale.consumers.clear();
    auto v3 = validate_graph(stale);
    bool found = false;
    for (const auto& s : v3) found = found || s.find("consumer index") != std::string::npos;
    CHECK(found);
}

TEST_CASE("shortcut_apply") {
    std::mt19937_64 rng(7);
    auto x = random_tensor<double>(rng, {3, 4, 4});

    Shortcut<double> id;
    id.kind = ShortcutKind::Identity;
    id.src_node = 0;
    CHECK(shortcut_apply(id, x).data == x.data);

    // +/- fold pair over equal channels contributes exactly zero
    Tensor<double> xeq = x;
    for (int y = 0; y < 4; ++y)
        for (int xx = 0; xx < 4; ++xx) xeq(2, y, xx) = xeq(1, y, xx);
    Shortcut<double> folded = id;
    folded.fold = {{{0, 1}, {1, 1}, {2, -1}}};
    auto out = shortcut_apply(folded, xeq, {SumMode::Exact, false});
    Tensor<double> just0({1, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int xx = 0; xx < 4; ++xx) just0(0, y, xx) = xeq(0, y, xx);
    CHECK(max_abs_diff(out, just0) == 0.0);

    Shortcut<double> proj;
    proj.kind = ShortcutKind::Projection;
    proj.src_node = 0;
    proj.proj = random_kernel<double>(rng, 5, 3, 1, 2, 0);
    proj.proj_bias.assign(5, 0.25);
    auto got = shortcut_apply(proj, x);
    auto want = conv2d(proj.proj, x);
    for (auto& v : want.data) v += 0.25;
    CHECK(got.data == want.data);
}

TEST_CASE("MCD: equal channels with equal parameters stay equal through stages") {
    std::mt19937_64 rng(8);
    auto x = random_tensor<double>(rng, {2, 4, 6, 6});
    // make channels 1 and 2 identical
    for (int b = 0; b < 2; ++b)
        for (int y = 0; y < 6; ++y)
            for (int xx = 0; xx < 6; ++xx) x(b, 2, y, xx) = x(b, 1, y, xx);

    std::vector<Stage<double>> stages = {Stage<double>::relu(), Stage<double>::maxpool(2, 2),
                                         Stage<double>::avgpool(2, 2),
                                         Stage<double>::batchnorm(4), Stage<double>::identity()};
    for (auto& g : stages[3].gamma) g = 0.8;
    for (auto& bt : stages[3].beta) bt = 0.1;
    for (const auto& st : stages) {
        ConvLayer<double> probe;
        Tensor<double> eye({4, 4, 1, 1});
        for (int c = 0; c < 4; ++c) eye(c, c, 0, 0) = 1;
        probe.w = Kernel4<double>(eye, 1, 0);
        probe.bias = {0, 0, 0, 0};
        probe.sigma = {st};
        auto y = layer_forward(probe, x);
        const int h = y.extent(2), w = y.extent(3);
        for (int b = 0; b < 2; ++b)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) CHECK(y(b, 1, yy, xx) == y(b, 2, yy, xx));
    }
}

TEST_CASE("forward determinism") {
    ArchSpec spec;
    spec.family = ArchFamily::ResNetCifar10;
    spec.width_r = 0.0625;
    auto net = build_arch<float>(spec, 9);
    std::mt19937_64 rng(10);
    auto batch = random_tensor<float>(rng, {3, 3, 32, 32});
    auto a = forward(net, batch);
    auto b = forward(net, batch);
    CHECK(a.logits.data == b.logits.data);
    CHECK(a.probs.data == b.probs.data);
}

TEST_CASE("ReLU idempotency") {
    auto relu = [](double v) { return v > 0 ? v : 0.0; };
    for (double v : {-1e9, -3.5, -1e-12, -0.0, 0.0, 1e-12, 0.5, 7.0, 1e9})
        CHECK(relu(1.0 * relu(v)) == relu(v));
}

TEST_CASE("graph serialization round-trips bit-exactly in f64") {
    ArchSpec spec;
    spec.family = ArchFamily::ResNetCifar10;
    spec.width_r = 0.125;
    auto net = build_arch<double>(spec, 77);
    // perturb running stats so they are not at defaults
    for (auto& st : net.nodes[0].conv.sigma)
        if (st.kind == StageKind::BatchNorm) {
            st.running_mean[0] = 0.123456789123456789;
            st.running_var[0] = 1.987654321987654321;
        }
    const std::string path = "roundtrip_checkpoint.json";
    save_graph(net, path);
    auto back = load_graph<double>(path);

    auto pa = collect_params(net);
    auto pb = collect_params(back);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);

    std::mt19937_64 rng(11);
    auto batch = random_tensor<double>(rng, {2, 3, 32, 32});
    auto ra = forward(net, batch);
    auto rb = forward(back, batch);
    CHECK(ra.logits.data == rb.logits.data);
    std::remove(path.c_str());
}
