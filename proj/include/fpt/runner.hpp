#ifndef FPT_RUNNER_HPP
#define FPT_RUNNER_HPP

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fpt/arch.hpp"
#include "fpt/config.hpp"
#include "fpt/data.hpp"
#include "fpt/metrics.hpp"
#include "fpt/morph.hpp"
#include "fpt/serialize.hpp"

namespace fpt {

/// Validation accuracy measured immediately before and after one transform.
struct TransformCheck {
    int epoch = 0;
    std::string kind;
    double val_acc_before = 0;
    double val_acc_after = 0;
    bool function_preserving = false;
};

struct RunArtifacts {
    RunLog log;
    std::vector<MorphReport> reports;
    std::vector<TransformCheck> checks;
    double final_val_acc = 0;
    std::string metrics_path;
    std::string checkpoint_path;
    std::string reports_path;
};

inline bool is_function_preserving_kind(const MorphSpecCfg& m) {
    if (m.kind == "r2_wider" || m.kind == "r2_deeper" || m.kind == "net2deeper" ||
        m.kind == "netmorph_wider")
        return true;
    if (m.kind == "net2wider") return m.noise_std == 0;
    return false;
}

namespace detail {

inline InitSpec make_init_spec(const MorphSpecCfg& m, std::uint64_t fallback_seed) {
    InitSpec init;
    if (m.init_scheme == "matched_std")
        init.scheme = InitScheme::MatchedStd;
    else if (m.init_scheme == "he")
        init.scheme = InitScheme::He;
    else if (m.init_scheme == "zeros")
        init.scheme = InitScheme::Zeros;
    else if (m.init_scheme == "scaled_matched_std")
        init.scheme = InitScheme::ScaledMatchedStd;
    else
        throw ConfigError("unknown init scheme '" + m.init_scheme + "'");
    init.multiplier = m.init_multiplier;
    init.rng_seed = m.init_seed != 0 ? m.init_seed : fallback_seed;
    return init;
}

inline FinalSigma parse_final_sigma(const std::string& s) {
    if (s == "identity") return FinalSigma::Identity;
    if (s == "relu") return FinalSigma::ReLU;
    if (s == "sigmoid") return FinalSigma::Sigmoid;
    throw ConfigError("unknown final_sigma '" + s + "'");
}

/// Channel increment for multiplying a layer's filter count by `factor`.
/// For R2R the increment must be even: E = (new - old) / 2.
inline int widen_increment(int old_channels, double factor, bool require_even) {
    const double target = old_channels * factor;
    const int new_c = static_cast<int>(std::llround(target));
    if (std::fabs(target - new_c) > 1e-9)
        throw ConfigError("widen factor " + std::to_string(factor) + " of " +
                          std::to_string(old_channels) + " channels is not an integer");
    const int extra = new_c - old_channels;
    if (extra <= 0)
        throw ConfigError("widen factor must increase the channel count");
    if (require_even && extra % 2 != 0)
        throw ConfigError("widening " + std::to_string(old_channels) + " channels by " +
                          std::to_string(factor) + " adds " + std::to_string(extra) +
                          " channels; R2WiderR requires an even increment");
    return extra;
}

/// Maximal runs of equal-width conv nodes after the stem: the residual stages.
/// Returns the last node index of each stage.
template <class T>
std::vector<int> stage_end_nodes(const NetworkGraph<T>& net) {
    std::vector<int> ends;
    const int n = static_cast<int>(net.nodes.size());
    if (n <= 1) return ends;
    int run_channels = net.nodes[1].conv.w.out_channels();
    for (int i = 2; i < n; ++i) {
        const int c = net.nodes[static_cast<std::size_t>(i)].conv.w.out_channels();
        if (c != run_channels) {
            ends.push_back(i - 1);
            run_channels = c;
        }
    }
    ends.push_back(n - 1);
    return ends;
}

} // namespace detail

/// Applies one configured transform to the graph. A negative target widens
/// every node (or deepens every stage); deepen-all inserts two residual blocks
/// per stage, the ResNetCifar-10 -> -18 recipe.
template <class T>
std::vector<MorphReport> apply_morph_spec(NetworkGraph<T>& net, const MorphSpecCfg& m,
                                          std::uint64_t fallback_seed) {
    std::vector<MorphReport> reports;
    const InitSpec base_init = detail::make_init_spec(m, fallback_seed);
    auto init_for = [&](int k) {
        InitSpec init = base_init;
        init.rng_seed += static_cast<std::uint64_t>(k) * 0x9e3779b9ull;
        return init;
    };

    if (m.kind == "r2_wider" || m.kind == "random_pad_widen" || m.kind == "netmorph_wider" ||
        m.kind == "net2wider") {
        std::vector<int> targets;
        if (m.target >= 0)
            targets.push_back(m.target);
        else
            for (int i = 0; i < static_cast<int>(net.nodes.size()); ++i) targets.push_back(i);
        const bool pair_structured = m.kind == "r2_wider" || m.kind == "random_pad_widen";
        for (int idx : targets) {
            const int old_c = net.nodes[static_cast<std::size_t>(idx)].conv.w.out_channels();
            int extra;
            if (m.kind == "net2wider" && m.new_width > 0 && m.target >= 0)
                extra = m.new_width - old_c;
            else if (m.widen_factor > 0)
                extra = detail::widen_increment(old_c, m.widen_factor, pair_structured);
            else
                extra = m.extra_channels;
            if (m.kind == "r2_wider") {
                WidenSpec ws{idx, extra, init_for(idx)};
                reports.push_back(r2_wider(net, ws));
            } else if (m.kind == "random_pad_widen") {
                WidenSpec ws{idx, extra, init_for(idx)};
                reports.push_back(random_pad_widen(net, ws));
            } else if (m.kind == "netmorph_wider") {
                reports.push_back(netmorph_wider(net, idx, extra,
                                                 m.zero_side == "in" ? ZeroSide::In : ZeroSide::Out,
                                                 init_for(idx)));
            } else {
                reports.push_back(net2wider(net, idx, old_c + extra, m.noise_std,
                                            init_for(idx).rng_seed));
            }
        }
        return reports;
    }

    if (m.kind == "r2_deeper" || m.kind == "random_pad_deepen" || m.kind == "net2deeper") {
        auto deepen_at = [&](int after, int k) {
            if (m.kind == "net2deeper") {
                reports.push_back(net2deeper(net, after));
                return 1; // nodes inserted
            }
            DeepenSpec ds;
            ds.insert_after = after;
            ds.block_channels = m.block_channels;
            ds.kernel_size = m.kernel_size;
            ds.final_sigma = detail::parse_final_sigma(m.final_sigma);
            ds.hidden_batchnorm = m.hidden_batchnorm;
            ds.init = init_for(k);
            reports.push_back(m.kind == "r2_deeper" ? r2_deeper(net, ds)
                                                    : random_pad_deepen(net, ds));
            return 2;
        };
        if (m.target >= 0) {
            deepen_at(m.target, 0);
            return reports;
        }
        // per stage, processed back to front so indices stay valid
        auto ends = detail::stage_end_nodes(net);
        const int per_stage = m.kind == "net2deeper" ? 4 : 2;
        int k = 0;
        for (auto it = ends.rbegin(); it != ends.rend(); ++it) {
            int at = *it;
            for (int b = 0; b < per_stage; ++b) at += deepen_at(at, k++);
        }
        return reports;
    }

    throw ConfigError("unknown transform kind '" + m.kind + "'");
}

/// Batched top-1 accuracy over a split. BatchNorm runs in eval mode (running
/// statistics); the net's stage modes are restored afterwards.
template <class T>
double evaluate_accuracy(NetworkGraph<T>& net, const std::vector<LabeledImage<T>>& split,
                         int batch_size, SumMode mode = SumMode::Sequential) {
    if (split.empty()) throw ConfigError("cannot evaluate on an empty split");
    set_batchnorm_train(net, false);
    ForwardOptions opts;
    opts.sum = mode;
    long long correct = 0;
    const NetworkGraph<T>& cnet = net;
    for (std::size_t start = 0; start < split.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(split.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        auto [batch, labels] = make_batch(split, idx);
        auto res = forward(cnet, batch, opts);
        for (int b = 0; b < batch.extent(0); ++b) {
            int best = 0;
            for (int c = 1; c < res.logits.extent(1); ++c)
                if (res.logits(b, c) > res.logits(b, best)) best = c;
            if (best == labels[static_cast<std::size_t>(b)]) ++correct;
        }
    }
    set_batchnorm_train(net, true);
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

namespace detail {

inline nlohmann::json report_to_json(const MorphReport& r) {
    nlohmann::json j;
    j["kind"] = r.kind;
    j["nodes_touched"] = r.nodes_touched;
    j["params_before"] = r.params_before;
    j["params_after"] = r.params_after;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(r.preserved_checksum_before));
    j["preserved_checksum_before"] = buf;
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(r.preserved_checksum_after));
    j["preserved_checksum_after"] = buf;
    j["preserves_existing_parameters"] = r.preserves_existing_parameters();
    j["rng_seed"] = r.rng_seed;
    if (!r.replication_map.empty()) j["replication_map"] = r.replication_map;
    return j;
}

} // namespace detail

/// Runs one configured experiment: trains per the schedule, applies transform
/// events at their epochs (validating function preservation at the transform
/// instant), records per-epoch metrics with cumulative training FLOPs, and
/// writes metrics.csv, morph_reports.json and a final checkpoint.
template <class T>
RunArtifacts run_experiment(const RunConfig& cfg) {
    validate_run_config(cfg);
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    Dataset<T> ds;
    if (cfg.dataset.kind == "synthetic") {
        const std::uint64_t dseed = cfg.dataset.seed != 0 ? cfg.dataset.seed : cfg.seed * 1315423911ull;
        ds = synthetic_dataset<T>(dseed, cfg.dataset.n, cfg.dataset.classes,
                                  cfg.dataset.difficulty);
    } else {
        ds = load_cifar10<T>(cfg.dataset.dir);
    }
    if (cfg.dataset.normalize) color_normalize(ds);

    NetworkGraph<T> net;
    if (!cfg.init_checkpoint.empty()) {
        net = load_graph<T>(cfg.init_checkpoint);
    } else {
        ArchSpec arch;
        if (cfg.arch.family == "resnet_cifar10")
            arch.family = ArchFamily::ResNetCifar10;
        else if (cfg.arch.family == "resnet_cifar18")
            arch.family = ArchFamily::ResNetCifar18;
        else if (cfg.arch.family == "small_conv")
            arch.family = ArchFamily::SmallConv;
        else
            arch.family = ArchFamily::SmallConvWidened;
        arch.width_r = cfg.arch.r;
        arch.residual = cfg.arch.residual;
        net = build_arch<T>(arch, cfg.seed);
    }
    {
        auto violations = validate_graph(net);
        if (!violations.empty())
            throw ConfigError("invalid starting graph: " + violations.front());
    }

    OptimizerState<T> opt = cfg.optimizer.kind == "adam"
                                ? OptimizerState<T>::adam(static_cast<T>(cfg.optimizer.lr),
                                                          static_cast<T>(cfg.weight_decay),
                                                          static_cast<T>(cfg.optimizer.beta1),
                                                          static_cast<T>(cfg.optimizer.beta2),
                                                          static_cast<T>(cfg.optimizer.eps))
                                : OptimizerState<T>::sgd(static_cast<T>(cfg.optimizer.lr),
                                                         static_cast<T>(cfg.optimizer.momentum),
                                                         static_cast<T>(cfg.weight_decay));

    RunArtifacts art;
    FlopCount flops = count_flops(net, net.input_shape);
    long long cum_examples = 0, cum_flops = 0;
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5851f42d4c957f2dull);
    const auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    auto apply_events_at = [&](int epoch) {
        std::string tag;
        for (const auto& ev : cfg.transforms) {
            if (ev.epoch != epoch) continue;
            const bool fpt = is_function_preserving_kind(ev.spec);
            const SumMode check_mode = fpt ? SumMode::Exact : SumMode::Sequential;
            TransformCheck check;
            check.epoch = epoch;
            check.kind = ev.spec.kind;
            check.function_preserving = fpt;
            check.val_acc_before = evaluate_accuracy(net, ds.val, cfg.batch_size, check_mode);
            auto reps = apply_morph_spec(net, ev.spec,
                                         cfg.seed ^ (static_cast<std::uint64_t>(epoch + 1) << 20));
            for (auto& r : reps) art.reports.push_back(std::move(r));
            check.val_acc_after = evaluate_accuracy(net, ds.val, cfg.batch_size, check_mode);
            art.checks.push_back(check);
            if (fpt && std::fabs(check.val_acc_after - check.val_acc_before) > 1e-3)
                throw Error("transform '" + ev.spec.kind + "' at epoch " + std::to_string(epoch) +
                            " changed validation accuracy by " +
                            std::to_string(check.val_acc_after - check.val_acc_before));
            // moment buffers no longer match the parameter set
            opt.m.clear();
            opt.v.clear();
            flops = count_flops(net, net.input_shape);
            if (!tag.empty()) tag += "+";
            tag += ev.spec.kind;
        }
        return tag;
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::string event_tag = apply_events_at(epoch);
        opt.lr = static_cast<T>(lr_schedule(epoch, cfg.optimizer.lr, cfg.lr_drops));

        double loss_sum = 0;
        long long correct = 0, seen = 0;
        auto order = shuffled_indices(ds.train.size(), shuffle_rng);
        ForwardOptions train_opts;
        train_opts.sum = SumMode::Sequential;
        train_opts.update_running_stats = true;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            auto [batch, labels] = make_batch(ds.train, idx);
            auto res = backward(net, batch, labels, train_opts);
            optimizer_step(opt, net, res.grads);
            const auto n = static_cast<long long>(idx.size());
            loss_sum += static_cast<double>(res.loss) * static_cast<double>(n);
            for (int b = 0; b < batch.extent(0); ++b) {
                int best = 0;
                for (int c = 1; c < res.logits.extent(1); ++c)
                    if (res.logits(b, c) > res.logits(b, best)) best = c;
                if (best == labels[static_cast<std::size_t>(b)]) ++correct;
            }
            seen += n;
            cum_examples += n;
            cum_flops += n * flops.train_step_flops_per_example;
        }

        MetricsRecord rec;
        rec.epoch = epoch;
        rec.cumulative_examples = cum_examples;
        rec.cumulative_train_flops = cum_flops;
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        rec.val_acc = evaluate_accuracy(net, ds.val, cfg.batch_size);
        rec.wall_seconds = wall();
        rec.event = event_tag;
        art.log.append(rec);
    }

    // events scheduled exactly at the end of training
    {
        const std::string tag = apply_events_at(cfg.epochs);
        if (!tag.empty()) {
            MetricsRecord rec;
            rec.epoch = cfg.epochs;
            rec.cumulative_examples = cum_examples;
            rec.cumulative_train_flops = cum_flops;
            if (!art.log.records().empty()) {
                rec.train_loss = art.log.records().back().train_loss;
                rec.train_acc = art.log.records().back().train_acc;
            }
            rec.val_acc = evaluate_accuracy(net, ds.val, cfg.batch_size);
            rec.wall_seconds = wall();
            rec.event = tag;
            art.log.append(rec);
        }
    }

    art.final_val_acc = art.log.records().empty()
                            ? evaluate_accuracy(net, ds.val, cfg.batch_size)
                            : art.log.records().back().val_acc;

    art.metrics_path = cfg.out_dir + "/metrics.csv";
    art.log.write_csv(art.metrics_path);
    art.checkpoint_path = cfg.out_dir + "/checkpoint.json";
    save_graph(net, art.checkpoint_path);
    art.reports_path = cfg.out_dir + "/morph_reports.json";
    {
        nlohmann::json j;
        j["reports"] = nlohmann::json::array();
        for (const auto& r : art.reports) j["reports"].push_back(detail::report_to_json(r));
        j["transform_checks"] = nlohmann::json::array();
        for (const auto& c : art.checks)
            j["transform_checks"].push_back({{"epoch", c.epoch},
                                             {"kind", c.kind},
                                             {"val_acc_before", c.val_acc_before},
                                             {"val_acc_after", c.val_acc_after},
                                             {"function_preserving", c.function_preserving}});
        std::ofstream out(art.reports_path);
        if (!out) throw IoError("cannot write '" + art.reports_path + "'");
        out << j.dump(2) << '\n';
    }
    {
        std::ofstream out(cfg.out_dir + "/config.json");
        if (out) out << run_config_to_json(cfg) << '\n';
    }
    return art;
}

} // namespace fpt

#endif
