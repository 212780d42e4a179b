#include "doctest.h"

#include <random>

#include "fpt/autodiff.hpp"
#include "fpt/morph.hpp"
#include "fpt/propcheck.hpp"
#include "test_support.hpp"

using namespace fpt;
using fpt::testing::attach_head;
using fpt::testing::conv_node;
using fpt::testing::gradient_check;
using fpt::testing::random_tensor;

namespace {

template <class T>
NetworkGraph<T> three_layer_net(std::mt19937_64& rng) {
    NetworkGraph<T> net;
    net.input_shape = {2, 6, 6};
    net.nodes.push_back(conv_node<T>(rng, 4, 2, 3, true, true));
    net.nodes.push_back(conv_node<T>(rng, 4, 4, 3, false, true));
    LayerNode<T> n2 = conv_node<T>(rng, 4, 4, 3, true, false);
    Shortcut<T> sc;
    sc.kind = ShortcutKind::Identity;
    sc.src_node = 0;
    n2.shortcut_in = sc;
    net.nodes.push_back(std::move(n2));
    attach_head(net, rng, 4, 5);
    return net;
}

} // namespace

TEST_CASE("uniform softmax gives ln(num_classes)") {
    std::mt19937_64 rng(1);
    NetworkGraph<double> net;
    net.input_shape = {2, 4, 4};
    net.nodes.push_back(conv_node<double>(rng, 3, 2, 3, false, true));
    attach_head(net, rng, 3, 10);
    for (auto& v : net.head.fc.w.w.data) v = 0; // all-zero final layer
    for (auto& v : net.head.fc.bias) v = 0;

    auto batch = random_tensor<double>(rng, {4, 2, 4, 4});
    std::vector<int> labels = {0, 3, 7, 9};
    auto res = backward(net, batch, labels);
    CHECK(res.loss == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("dead ReLU path with zero subgradient gets exactly zero gradient") {
    std::mt19937_64 rng(2);
    NetworkGraph<double> net;
    net.input_shape = {2, 4, 4};
    auto n0 = conv_node<double>(rng, 3, 2, 3, false, false);
    n0.conv.sigma.push_back(Stage<double>::relu(0.0));
    for (auto& b : n0.conv.bias) b = -100.0; // drives every pre-activation negative
    net.nodes.push_back(n0);
    net.nodes.push_back(conv_node<double>(rng, 3, 3, 3, false, true));
    attach_head(net, rng, 3, 4);

    Tensor<double> batch = random_tensor<double>(rng, {2, 2, 4, 4}, -0.1, 0.1);
    std::vector<int> labels = {1, 2};
    auto res = backward(net, batch, labels);
    for (double g : res.grads.nodes[0].dw.data) CHECK(g == 0.0);
    for (double g : res.grads.nodes[0].dbias) CHECK(g == 0.0);

    // zero-influence parameter, central differences
    const double fd = finite_diff_grad(net, batch, labels, std::size_t{0}, 1e-5);
    CHECK(std::fabs(fd) < 1e-8);
}

TEST_CASE("central differences on an analytic quadratic") {
    auto f = [](double w) { return w * w; };
    const double w = 3.0, step = 1e-5;
    const double fd = (f(w + step) - f(w - step)) / (2 * step);
    CHECK(fd == doctest::Approx(6.0).epsilon(1e-8));
}

TEST_CASE("backward matches central finite differences on random nets") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        std::mt19937_64 rng(seed);
        auto net = three_layer_net<double>(rng);
        auto batch = random_tensor<double>(rng, {3, 2, 6, 6});
        std::vector<int> labels = {0, 2, 4};
        auto res = gradient_check(net, batch, labels, 1e-5, /*param_stride=*/3);
        CAPTURE(seed);
        CHECK(res.checked > 50);
        CHECK(res.max_rel_err <= 1e-4);
    }
}

TEST_CASE("SGD step") {
    std::mt19937_64 rng(3);
    NetworkGraph<double> net;
    net.input_shape = {1, 1, 1};
    LayerNode<double> n0;
    n0.conv.w = Kernel4<double>(Tensor<double>({1, 1, 1, 1}, {1.0}), 1, 0);
    n0.conv.bias = {0.0};
    net.nodes.push_back(n0);
    attach_head(net, rng, 1, 2);
    auto grads = make_zero_grads(net);
    grads.nodes[0].dw.data[0] = 2.0;

    auto opt = OptimizerState<double>::sgd(0.1);
    optimizer_step(opt, net, grads);
    CHECK(net.nodes[0].conv.w.w.data[0] == doctest::Approx(0.8).epsilon(1e-15));

    // zero gradient, zero decay: fixed point for SGD and Adam
    auto zero = make_zero_grads(net);
    auto before = net.nodes[0].conv.w.w.data[0];
    optimizer_step(opt, net, zero);
    CHECK(net.nodes[0].conv.w.w.data[0] == before);
    auto adam = OptimizerState<double>::adam(1e-3);
    optimizer_step(adam, net, zero);
    CHECK(net.nodes[0].conv.w.w.data[0] == before);

    grads.nodes[0].dw.data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(optimizer_step(opt, net, grads), NonFiniteGradient);
}

TEST_CASE("Adam first step matches a scalar reference") {
    std::mt19937_64 rng(4);
    NetworkGraph<double> net;
    net.input_shape = {2, 3, 3};
    net.nodes.push_back(conv_node<double>(rng, 2, 2, 1, false, false));
    attach_head(net, rng, 2, 3);

    auto params_before = std::vector<double>();
    for (auto* p : collect_params(net)) params_before.push_back(*p);

    auto grads = make_zero_grads(net);
    for (auto* g : collect_grads(grads)) *g = 1.0;

    const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    auto opt = OptimizerState<double>::adam(lr);
    optimizer_step(opt, net, grads);

    // scalar reference, one step, g = 1
    const double m = (1 - b1) * 1.0, v = (1 - b2) * 1.0;
    const double mhat = m / (1 - b1), vhat = v / (1 - b2);
    const double update = lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(update == doctest::Approx(lr).epsilon(1e-6));

    auto params = collect_params(net);
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(*params[i] == doctest::Approx(params_before[i] - update).epsilon(1e-10));
}

TEST_CASE("lr_schedule") {
    std::vector<std::pair<int, double>> drops = {{25, 0.2}};
    CHECK(lr_schedule(24, 3e-3, drops) == doctest::Approx(3e-3));
    CHECK(lr_schedule(25, 3e-3, drops) == doctest::Approx(6e-4));
    CHECK(lr_schedule(100, 3e-3, {}) == doctest::Approx(3e-3));
}

TEST_CASE("loss decreases over 50 SGD steps on a separable task") {
    std::mt19937_64 rng(5);
    NetworkGraph<double> net;
    net.input_shape = {2, 4, 4};
    net.nodes.push_back(conv_node<double>(rng, 4, 2, 3, false, true));
    attach_head(net, rng, 4, 2);

    // separable toy batch: class means +-0.5 per channel
    Tensor<double> batch({16, 2, 4, 4});
    std::vector<int> labels(16);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (int b = 0; b < 16; ++b) {
        labels[static_cast<std::size_t>(b)] = b % 2;
        const double mu = b % 2 == 0 ? 0.5 : -0.5;
        for (int c = 0; c < 2; ++c)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x)
                    batch(b, c, y, x) = (c == 0 ? mu : -mu) + noise(rng);
    }

    auto opt = OptimizerState<double>::sgd(0.05);
    std::vector<double> losses;
    for (int step = 0; step < 50; ++step) {
        auto res = backward(net, batch, labels);
        losses.push_back(res.loss);
        optimizer_step(opt, net, res.grads);
    }
    auto ma = [&](std::size_t k) {
        double s = 0;
        for (std::size_t i = k; i < k + 10; ++i) s += losses[i];
        return s / 10.0;
    };
    for (std::size_t k = 0; k + 11 <= losses.size(); ++k) CHECK(ma(k + 1) <= ma(k) + 1e-12);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("symmetric gradients immediately after r2_wider") {
    std::mt19937_64 rng(6);
    auto net = three_layer_net<double>(rng);
    WidenSpec ws;
    ws.target_node = 1;
    ws.extra_channels = 4;
    ws.init.scheme = InitScheme::MatchedStd;
    ws.init.rng_seed = 99;
    r2_wider(net, ws);

    auto batch = random_tensor<double>(rng, {4, 2, 6, 6});
    std::vector<int> labels = {0, 1, 2, 3};
    auto res = backward(net, batch, labels);

    const int E = 2;
    const auto& dw1 = res.grads.nodes[1].dw; // widened producer: rows [orig | L | R]
    const int c_orig = dw1.extent(0) - 2 * E;
    double max_rel = 0;
    bool any_signal = false;
    for (int j = 0; j < E; ++j)
        for (int m = 0; m < dw1.extent(1); ++m)
            for (int r = 0; r < dw1.extent(2); ++r)
                for (int c = 0; c < dw1.extent(3); ++c) {
                    const double gl = dw1(c_orig + j, m, r, c);
                    const double gr = dw1(c_orig + E + j, m, r, c);
                    any_signal = any_signal || gl != 0.0;
                    max_rel = std::max(max_rel, fpt::testing::rel_err(gl, -gr, 1e-6));
                }
    CHECK(any_signal);
    CHECK(max_rel <= 1e-6);

    // the downstream pair gets equal gradients, so one step breaks W_L == -W_R
    const auto& w2 = net.nodes[2].conv.w.w;
    const int cc = w2.extent(1) - 2 * E;
    auto opt = OptimizerState<double>::adam(1e-3);
    optimizer_step(opt, net, res.grads);
    const auto& w1 = net.nodes[1].conv.w.w;
    double wl_wr = 0, sum_pair = 0;
    for (int j = 0; j < E; ++j)
        for (int m = 0; m < w1.extent(1); ++m)
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c)
                    wl_wr += std::fabs(w1(c_orig + j, m, r, c) - w1(c_orig + E + j, m, r, c));
    for (int j = 0; j < E; ++j)
        for (int o = 0; o < w2.extent(0); ++o)
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c)
                    sum_pair += std::fabs(w2(o, cc + j, r, c) + w2(o, cc + E + j, r, c));
    CHECK(wl_wr > 1e-8);
    CHECK(sum_pair > 1e-8);
}

TEST_CASE("gradient flows into shortcut projections and fold maps") {
    std::mt19937_64 rng(7);
    NetworkGraph<double> net;
    net.input_shape = {2, 6, 6};
    net.nodes.push_back(conv_node<double>(rng, 3, 2, 3, false, true));
    net.nodes.push_back(conv_node<double>(rng, 5, 3, 3, false, true, 2));
    auto& n1 = net.nodes.back();
    Shortcut<double> sc;
    sc.kind = ShortcutKind::Projection;
    sc.src_node = 0;
    sc.proj = fpt::testing::random_kernel<double>(rng, 5, 3, 1, 2, 0);
    sc.proj_bias.assign(5, 0.1);
    n1.shortcut_in = sc;
    attach_head(net, rng, 5, 3);

    auto batch = random_tensor<double>(rng, {2, 2, 6, 6});
    std::vector<int> labels = {1, 2};
    auto res = gradient_check(net, batch, labels, 1e-5, 5);
    CHECK(res.checked > 10);
    CHECK(res.max_rel_err <= 1e-4);

    auto bw = backward(net, batch, labels);
    double proj_grad_norm = 0;
    for (double g : bw.grads.nodes[1].dproj.data) proj_grad_norm += g * g;
    CHECK(proj_grad_norm > 0);
}
