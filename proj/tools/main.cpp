#include <cstdio>
#include <string>

#include "CLI11.hpp"

#include "fpt/propcheck.hpp"
#include "fpt/runner.hpp"

namespace {

using namespace fpt;

int cmd_run(const std::string& config_path, std::uint64_t seed_override, bool force_f64,
            const std::string& data_dir, const std::string& out_dir) {
    RunConfig cfg = load_run_config(config_path);
    if (seed_override != 0) cfg.seed = seed_override;
    if (force_f64) cfg.dtype = "f64";
    if (!data_dir.empty()) {
        cfg.dataset.kind = "cifar10";
        cfg.dataset.dir = data_dir;
        cfg.dataset.normalize = true;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    validate_run_config(cfg);

    auto summarize = [&](const RunArtifacts& art) {
        std::printf("run '%s' finished: %d epochs, final val acc %.4f\n", cfg.name.c_str(),
                    cfg.epochs, art.final_val_acc);
        for (const auto& c : art.checks)
            std::printf("  transform %-18s @ epoch %-3d val acc %.4f -> %.4f%s\n", c.kind.c_str(),
                        c.epoch, c.val_acc_before, c.val_acc_after,
                        c.function_preserving ? " (function preserving)" : "");
        std::printf("  metrics:    %s\n", art.metrics_path.c_str());
        std::printf("  checkpoint: %s\n", art.checkpoint_path.c_str());
    };
    if (cfg.dtype == "f64")
        summarize(run_experiment<double>(cfg));
    else
        summarize(run_experiment<float>(cfg));
    return 0;
}

template <class T>
bool verify_rows(const char* dtype, int trials, std::uint64_t seed, double tol_seq,
                 double tol_exact) {
    bool ok = true;
    auto rows = preservation_suite<T>(trials, seed);
    for (const auto& r : rows) {
        const bool require_exact_zero = r.transform == "r2_wider" || r.transform == "r2_deeper";
        const bool pass = r.max_dev_sequential <= tol_seq &&
                          r.max_dev_exact <= (require_exact_zero ? 0.0 : tol_exact);
        ok = ok && pass;
        std::printf("%-16s %-4s trials=%-3d max|dev| seq=%-12.3g exact=%-12.3g %s\n",
                    r.transform.c_str(), dtype, r.trials, r.max_dev_sequential, r.max_dev_exact,
                    pass ? "PASS" : "FAIL");
    }
    return ok;
}

int cmd_verify(int trials, std::uint64_t seed) {
    std::printf("function-preservation suite (%d random nets per transform)\n", trials);
    bool ok = verify_rows<float>("f32", trials, seed, 1e-5, 1e-5);
    ok = verify_rows<double>("f64", trials, seed, 1e-10, 1e-10) && ok;
    std::printf("%s\n", ok ? "all preservation checks passed" : "PRESERVATION CHECKS FAILED");
    return ok ? 0 : 2;
}

template <class T>
int print_flops(const std::string& checkpoint) {
    auto net = load_graph<T>(checkpoint);
    const FlopCount fc = count_flops(net, net.input_shape);
    std::printf("input shape      : %dx%dx%d\n", net.input_shape[0], net.input_shape[1],
                net.input_shape[2]);
    std::printf("conv layers      : %zu (+1 fc head)\n", net.nodes.size());
    std::printf("parameters       : %zu\n", param_count(net));
    std::printf("forward flops    : %lld per example\n", fc.forward_flops_per_example);
    std::printf("train-step flops : %lld per example\n", fc.train_step_flops_per_example);
    return 0;
}

int cmd_flops(const std::string& checkpoint) {
    if (checkpoint_dtype(checkpoint) == "f64") return print_flops<double>(checkpoint);
    return print_flops<float>(checkpoint);
}

template <class T>
int do_export(const std::string& checkpoint, int node, const std::string& out) {
    auto net = load_graph<T>(checkpoint);
    std::filesystem::create_directories(out);
    auto paths = export_filters(net, node, out);
    std::printf("wrote %zu filter images to %s\n", paths.size(), out.c_str());
    return 0;
}

int cmd_export_filters(const std::string& checkpoint, int node, const std::string& out) {
    if (checkpoint_dtype(checkpoint) == "f64") return do_export<double>(checkpoint, node, out);
    return do_export<float>(checkpoint, node, out);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"function-preserving network transforms: training and evaluation runner"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, checkpoint;
    std::uint64_t seed = 0;
    bool f64 = false;
    int trials = 20, node = 0;

    auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
    run->add_option("config", config_path, "config file")->required();
    run->add_option("--seed", seed, "override the run seed");
    run->add_flag("--f64", f64, "force 64-bit floats");
    run->add_option("--data-dir", data_dir, "CIFAR-10 binary directory (overrides dataset)");
    run->add_option("--out", out_dir, "output directory override");

    auto* verify = app.add_subcommand("verify", "run the function-preservation property suite");
    verify->add_option("--trials", trials, "random networks per transform");
    verify->add_option("--seed", seed, "base seed");

    auto* flops = app.add_subcommand("flops", "print the FLOP count of a checkpoint");
    flops->add_option("checkpoint", checkpoint, "graph checkpoint")->required();

    auto* exp = app.add_subcommand("export-filters", "write a node's filters as PGM/PPM images");
    exp->add_option("checkpoint", checkpoint, "graph checkpoint")->required();
    exp->add_option("node", node, "node index")->required();
    exp->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (run->parsed()) return cmd_run(config_path, seed, f64, data_dir, out_dir);
        if (verify->parsed()) return cmd_verify(trials, seed == 0 ? 2024 : seed);
        if (flops->parsed()) return cmd_flops(checkpoint);
        if (exp->parsed())
            return cmd_export_filters(checkpoint, node, out_dir.empty() ? "filters" : out_dir);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
