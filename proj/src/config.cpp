#include "fpt/config.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

#include "fpt/errors.hpp"

namespace fpt {

namespace {

using nlohmann::json;

MorphSpecCfg parse_morph_spec(const json& j) {
    MorphSpecCfg m;
    m.kind = j.at("kind").get<std::string>();
    if (j.contains("target")) {
        if (j.at("target").is_string()) {
            const auto s = j.at("target").get<std::string>();
            if (s != "all" && s != "per_stage")
                throw ConfigError("transform target must be a node id, \"all\" or \"per_stage\"");
            m.target = -1;
        } else {
            m.target = j.at("target").get<int>();
        }
    }
    m.widen_factor = j.value("widen_factor", 0.0);
    m.extra_channels = j.value("extra_channels", 0);
    m.new_width = j.value("new_width", 0);
    m.noise_std = j.value("noise_std", 0.0);
    m.zero_side = j.value("zero_side", "out");
    m.block_channels = j.value("block_channels", 0);
    m.kernel_size = j.value("kernel_size", 3);
    m.final_sigma = j.value("final_sigma", "identity");
    m.hidden_batchnorm = j.value("hidden_batchnorm", true);
    if (j.contains("init")) {
        const auto& ji = j.at("init");
        m.init_scheme = ji.value("scheme", "matched_std");
        m.init_multiplier = ji.value("multiplier", 1.0);
        m.init_seed = ji.value("seed", std::uint64_t{0});
    }
    return m;
}

json morph_spec_to_json(const MorphSpecCfg& m) {
    json j;
    j["kind"] = m.kind;
    if (m.target < 0)
        j["target"] = m.kind == "r2_deeper" || m.kind == "net2deeper" || m.kind == "random_pad_deepen"
                          ? "per_stage"
                          : "all";
    else
        j["target"] = m.target;
    if (m.widen_factor > 0) j["widen_factor"] = m.widen_factor;
    if (m.extra_channels > 0) j["extra_channels"] = m.extra_channels;
    if (m.new_width > 0) j["new_width"] = m.new_width;
    if (m.noise_std > 0) j["noise_std"] = m.noise_std;
    j["zero_side"] = m.zero_side;
    if (m.block_channels > 0) j["block_channels"] = m.block_channels;
    j["kernel_size"] = m.kernel_size;
    j["final_sigma"] = m.final_sigma;
    j["hidden_batchnorm"] = m.hidden_batchnorm;
    j["init"] = {{"scheme", m.init_scheme},
                 {"multiplier", m.init_multiplier},
                 {"seed", m.init_seed}};
    return j;
}

} // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError("config parse error: " + std::string(e.what()));
    }
    try {
        RunConfig cfg;
        cfg.name = j.value("name", "run");
        if (j.contains("arch")) {
            const auto& ja = j.at("arch");
            cfg.arch.family = ja.value("family", "resnet_cifar10");
            cfg.arch.r = ja.value("r", 1.0);
            cfg.arch.residual = ja.value("residual", true);
        }
        cfg.init_checkpoint = j.value("init_checkpoint", "");
        if (j.contains("optimizer")) {
            const auto& jo = j.at("optimizer");
            cfg.optimizer.kind = jo.value("kind", "adam");
            cfg.optimizer.lr = jo.value("lr", 1e-3);
            cfg.optimizer.momentum = jo.value("momentum", 0.0);
            cfg.optimizer.beta1 = jo.value("beta1", 0.9);
            cfg.optimizer.beta2 = jo.value("beta2", 0.999);
            cfg.optimizer.eps = jo.value("eps", 1e-8);
        }
        cfg.weight_decay = j.value("weight_decay", 0.0);
        cfg.batch_size = j.value("batch_size", 128);
        cfg.epochs = j.value("epochs", 10);
        if (j.contains("lr_drops"))
            for (const auto& d : j.at("lr_drops"))
                cfg.lr_drops.emplace_back(d.at("epoch").get<int>(), d.at("factor").get<double>());
        if (j.contains("transforms"))
            for (const auto& t : j.at("transforms"))
                cfg.transforms.push_back({t.at("epoch").get<int>(), parse_morph_spec(t)});
        cfg.seed = j.value("seed", std::uint64_t{1});
        cfg.dtype = j.value("dtype", "f32");
        if (j.contains("dataset")) {
            const auto& jd = j.at("dataset");
            cfg.dataset.kind = jd.value("kind", "synthetic");
            cfg.dataset.dir = jd.value("dir", "");
            cfg.dataset.seed = jd.value("seed", std::uint64_t{0});
            cfg.dataset.n = jd.value("n", 5000);
            cfg.dataset.classes = jd.value("classes", 10);
            cfg.dataset.difficulty = jd.value("difficulty", 0.3);
            cfg.dataset.normalize = jd.value("normalize", cfg.dataset.kind == "cifar10");
        }
        cfg.out_dir = j.value("out_dir", "run_out");
        validate_run_config(cfg);
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError("config field error: " + std::string(e.what()));
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

void validate_run_config(const RunConfig& cfg) {
    static const std::set<std::string> kinds = {
        "r2_wider",       "r2_deeper",  "net2wider",        "net2deeper",
        "netmorph_wider", "random_pad_widen", "random_pad_deepen"};
    static const std::set<std::string> families = {"resnet_cifar10", "resnet_cifar18",
                                                   "small_conv", "small_conv_widened"};
    if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (cfg.dtype != "f32" && cfg.dtype != "f64")
        throw ConfigError("dtype must be f32 or f64");
    if (!families.count(cfg.arch.family))
        throw ConfigError("unknown architecture family '" + cfg.arch.family + "'");
    if (cfg.optimizer.kind != "adam" && cfg.optimizer.kind != "sgd")
        throw ConfigError("optimizer must be adam or sgd");
    if (cfg.dataset.kind != "synthetic" && cfg.dataset.kind != "cifar10")
        throw ConfigError("dataset kind must be synthetic or cifar10");
    if (cfg.dataset.kind == "cifar10" && cfg.dataset.dir.empty())
        throw ConfigError("cifar10 dataset requires a directory");
    for (const auto& ev : cfg.transforms) {
        if (ev.epoch < 0 || ev.epoch > cfg.epochs)
            throw ConfigError("transform epoch " + std::to_string(ev.epoch) +
                              " outside [0, epochs]");
        if (!kinds.count(ev.spec.kind))
            throw ConfigError("unknown transform kind '" + ev.spec.kind + "'");
        if (ev.spec.zero_side != "in" && ev.spec.zero_side != "out")
            throw ConfigError("zero_side must be in or out");
    }
    int last = -1;
    for (const auto& [e, f] : cfg.lr_drops) {
        if (e < last) throw ConfigError("lr_drops must be sorted by epoch");
        if (f <= 0) throw ConfigError("lr drop factors must be > 0");
        last = e;
    }
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["name"] = cfg.name;
    j["arch"] = {{"family", cfg.arch.family}, {"r", cfg.arch.r}, {"residual", cfg.arch.residual}};
    if (!cfg.init_checkpoint.empty()) j["init_checkpoint"] = cfg.init_checkpoint;
    j["optimizer"] = {{"kind", cfg.optimizer.kind},   {"lr", cfg.optimizer.lr},
                      {"momentum", cfg.optimizer.momentum}, {"beta1", cfg.optimizer.beta1},
                      {"beta2", cfg.optimizer.beta2}, {"eps", cfg.optimizer.eps}};
    j["weight_decay"] = cfg.weight_decay;
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["lr_drops"] = json::array();
    for (const auto& [e, f] : cfg.lr_drops)
        j["lr_drops"].push_back({{"epoch", e}, {"factor", f}});
    j["transforms"] = json::array();
    for (const auto& ev : cfg.transforms) {
        json t = morph_spec_to_json(ev.spec);
        t["epoch"] = ev.epoch;
        j["transforms"].push_back(t);
    }
    j["seed"] = cfg.seed;
    j["dtype"] = cfg.dtype;
    j["dataset"] = {{"kind", cfg.dataset.kind},     {"dir", cfg.dataset.dir},
                    {"seed", cfg.dataset.seed},     {"n", cfg.dataset.n},
                    {"classes", cfg.dataset.classes}, {"difficulty", cfg.dataset.difficulty},
                    {"normalize", cfg.dataset.normalize}};
    j["out_dir"] = cfg.out_dir;
    return j.dump(2);
}

} // namespace fpt
