#ifndef FPT_SERIALIZE_HPP
#define FPT_SERIALIZE_HPP

#include <fstream>
#include <string>

#include "json.hpp"

#include "fpt/graph.hpp"

namespace fpt {

// Versioned JSON checkpoint format. Values are stored as JSON numbers, which
// round-trip bit-exactly for both float and double payloads.

inline constexpr int kGraphFormatVersion = 1;

namespace detail {

template <class T>
nlohmann::json tensor_to_json(const Tensor<T>& t) {
    nlohmann::json j;
    j["shape"] = t.shape;
    j["data"] = std::vector<double>(t.data.begin(), t.data.end());
    return j;
}

template <class T>
Tensor<T> tensor_from_json(const nlohmann::json& j) {
    std::vector<int> shape = j.at("shape").get<std::vector<int>>();
    std::vector<double> raw = j.at("data").get<std::vector<double>>();
    std::vector<T> data(raw.begin(), raw.end());
    return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
nlohmann::json kernel_to_json(const Kernel4<T>& k) {
    nlohmann::json j = tensor_to_json(k.w);
    j["stride"] = k.stride;
    j["padding"] = k.padding;
    return j;
}

template <class T>
Kernel4<T> kernel_from_json(const nlohmann::json& j) {
    return Kernel4<T>(tensor_from_json<T>(j), j.at("stride").get<int>(),
                      j.at("padding").get<int>());
}

template <class T>
std::vector<double> vec_to_double(const std::vector<T>& v) {
    return std::vector<double>(v.begin(), v.end());
}

template <class T>
std::vector<T> vec_from_double(const nlohmann::json& j) {
    std::vector<double> raw = j.get<std::vector<double>>();
    return std::vector<T>(raw.begin(), raw.end());
}

template <class T>
nlohmann::json stage_to_json(const Stage<T>& s) {
    nlohmann::json j;
    j["kind"] = stage_kind_name(s.kind);
    switch (s.kind) {
        case StageKind::Identity:
            break;
        case StageKind::ReLU:
            j["subgrad_at_zero"] = static_cast<double>(s.relu_subgrad_at_zero);
            break;
        case StageKind::BatchNorm:
            j["gamma"] = vec_to_double(s.gamma);
            j["beta"] = vec_to_double(s.beta);
            j["running_mean"] = vec_to_double(s.running_mean);
            j["running_var"] = vec_to_double(s.running_var);
            j["epsilon"] = static_cast<double>(s.bn_epsilon);
            j["momentum"] = static_cast<double>(s.bn_momentum);
            j["train"] = s.bn_train;
            break;
        case StageKind::MaxPool:
        case StageKind::AvgPool:
            j["k"] = s.pool_k;
            j["stride"] = s.pool_stride;
            j["pad"] = s.pool_pad;
            break;
    }
    return j;
}

template <class T>
Stage<T> stage_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    Stage<T> s;
    if (kind == "identity") {
        s.kind = StageKind::Identity;
    } else if (kind == "relu") {
        s.kind = StageKind::ReLU;
        s.relu_subgrad_at_zero = static_cast<T>(j.value("subgrad_at_zero", 1.0));
    } else if (kind == "batchnorm") {
        s.kind = StageKind::BatchNorm;
        s.gamma = vec_from_double<T>(j.at("gamma"));
        s.beta = vec_from_double<T>(j.at("beta"));
        s.running_mean = vec_from_double<T>(j.at("running_mean"));
        s.running_var = vec_from_double<T>(j.at("running_var"));
        s.bn_epsilon = static_cast<T>(j.value("epsilon", 1e-5));
        s.bn_momentum = static_cast<T>(j.value("momentum", 0.1));
        s.bn_train = j.value("train", true);
    } else if (kind == "maxpool" || kind == "avgpool") {
        s.kind = kind == "maxpool" ? StageKind::MaxPool : StageKind::AvgPool;
        s.pool_k = j.at("k").get<int>();
        s.pool_stride = j.at("stride").get<int>();
        s.pool_pad = j.value("pad", 0);
    } else {
        throw MalformedFile("unknown pipeline stage kind '" + kind + "'");
    }
    return s;
}

template <class T>
nlohmann::json conv_to_json(const ConvLayer<T>& c) {
    nlohmann::json j;
    j["kernel"] = kernel_to_json(c.w);
    j["bias"] = vec_to_double(c.bias);
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : c.sigma) stages.push_back(stage_to_json(s));
    j["pipeline"] = stages;
    return j;
}

template <class T>
ConvLayer<T> conv_from_json(const nlohmann::json& j) {
    ConvLayer<T> c;
    c.w = kernel_from_json<T>(j.at("kernel"));
    c.bias = vec_from_double<T>(j.at("bias"));
    for (const auto& s : j.at("pipeline")) c.sigma.push_back(stage_from_json<T>(s));
    return c;
}

template <class T>
nlohmann::json shortcut_to_json(const Shortcut<T>& sc) {
    nlohmann::json j;
    j["src"] = sc.src_node;
    switch (sc.kind) {
        case ShortcutKind::Identity: j["kind"] = "identity"; break;
        case ShortcutKind::ZeroPad:
            j["kind"] = "zeropad";
            j["channels"] = sc.zeropad_channels;
            break;
        case ShortcutKind::Projection:
            j["kind"] = "projection";
            j["kernel"] = kernel_to_json(sc.proj);
            j["bias"] = vec_to_double(sc.proj_bias);
            break;
    }
    nlohmann::json fold = nlohmann::json::array();
    for (const auto& row : sc.fold) {
        nlohmann::json r = nlohmann::json::array();
        for (const auto& e : row) r.push_back({e.src, e.sign});
        fold.push_back(r);
    }
    j["fold"] = fold;
    return j;
}

template <class T>
Shortcut<T> shortcut_from_json(const nlohmann::json& j) {
    Shortcut<T> sc;
    sc.src_node = j.at("src").get<int>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "identity") {
        sc.kind = ShortcutKind::Identity;
    } else if (kind == "zeropad") {
        sc.kind = ShortcutKind::ZeroPad;
        sc.zeropad_channels = j.at("channels").get<int>();
    } else if (kind == "projection") {
        sc.kind = ShortcutKind::Projection;
        sc.proj = kernel_from_json<T>(j.at("kernel"));
        sc.proj_bias = vec_from_double<T>(j.at("bias"));
    } else {
        throw MalformedFile("unknown shortcut kind '" + kind + "'");
    }
    for (const auto& row : j.at("fold")) {
        std::vector<FoldEntry> r;
        for (const auto& e : row) r.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
        sc.fold.push_back(std::move(r));
    }
    return sc;
}

} // namespace detail

template <class T>
nlohmann::json graph_to_json(const NetworkGraph<T>& net) {
    nlohmann::json j;
    j["format"] = "fpt-graph";
    j["version"] = kGraphFormatVersion;
    j["dtype"] = std::is_same_v<T, double> ? "f64" : "f32";
    j["input_shape"] = std::vector<int>(net.input_shape.begin(), net.input_shape.end());
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : net.nodes) {
        nlohmann::json nj;
        nj["conv"] = detail::conv_to_json(n.conv);
        if (n.shortcut_in) nj["shortcut"] = detail::shortcut_to_json(*n.shortcut_in);
        nodes.push_back(nj);
    }
    j["nodes"] = nodes;
    j["head"]["fc"] = detail::conv_to_json(net.head.fc);
    return j;
}

template <class T>
NetworkGraph<T> graph_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "fpt-graph")
        throw MalformedFile("not an fpt-graph checkpoint");
    if (j.value("version", 0) != kGraphFormatVersion)
        throw MalformedFile("unsupported checkpoint version");
    NetworkGraph<T> net;
    auto shape = j.at("input_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw MalformedFile("input_shape must have 3 extents");
    net.input_shape = {shape[0], shape[1], shape[2]};
    for (const auto& nj : j.at("nodes")) {
        LayerNode<T> node;
        node.conv = detail::conv_from_json<T>(nj.at("conv"));
        if (nj.contains("shortcut")) node.shortcut_in = detail::shortcut_from_json<T>(nj.at("shortcut"));
        net.nodes.push_back(std::move(node));
    }
    net.head.fc = detail::conv_from_json<T>(j.at("head").at("fc"));
    net.rebuild_consumers();
    return net;
}

/// dtype tag recorded in a checkpoint file ("f32" or "f64").
inline std::string checkpoint_dtype(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedFile("checkpoint parse error: " + std::string(e.what()));
    }
    return j.value("dtype", "f32");
}

template <class T>
void save_graph(const NetworkGraph<T>& net, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out << graph_to_json(net).dump();
    out << '\n';
    if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

template <class T>
NetworkGraph<T> load_graph(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedFile("checkpoint parse error: " + std::string(e.what()));
    }
    try {
        return graph_from_json<T>(j);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedFile("checkpoint field error: " + std::string(e.what()));
    }
}

} // namespace fpt

#endif
