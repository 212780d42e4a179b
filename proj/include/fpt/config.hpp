#ifndef FPT_CONFIG_HPP
#define FPT_CONFIG_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace fpt {

/// One transform application inside a run: what kind, where, how much, and how
/// new parameters are initialized. `target == -1` means "all" for widening
/// kinds and "per stage" for deepening kinds.
struct MorphSpecCfg {
    std::string kind = "r2_wider"; // r2_wider | r2_deeper | net2wider | net2deeper |
                                   // netmorph_wider | random_pad_widen | random_pad_deepen
    int target = -1;
    double widen_factor = 0;  // > 0: per-layer extra derived from old * factor
    int extra_channels = 0;   // used when widen_factor == 0
    int new_width = 0;        // net2wider with explicit q
    double noise_std = 0;     // net2wider symmetry-breaking noise
    std::string zero_side = "out"; // netmorph_wider
    int block_channels = 0;   // deepen; 0 = stage width
    int kernel_size = 3;
    std::string final_sigma = "identity"; // identity | relu | sigmoid
    bool hidden_batchnorm = true;
    std::string init_scheme = "matched_std"; // matched_std | he | zeros | scaled_matched_std
    double init_multiplier = 1.0;
    std::uint64_t init_seed = 0; // 0 = derive from run seed and epoch
};

struct TransformEvent {
    int epoch = 0;
    MorphSpecCfg spec;
};

struct OptimizerCfg {
    std::string kind = "adam"; // adam | sgd
    double lr = 1e-3;
    double momentum = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct DatasetCfg {
    std::string kind = "synthetic"; // synthetic | cifar10
    std::string dir;                // cifar10 binary directory
    std::uint64_t seed = 0;         // synthetic
    int n = 5000;
    int classes = 10;
    double difficulty = 0.3;
    bool normalize = false; // defaults to true for cifar10 in the parser
};

struct ArchCfg {
    std::string family = "resnet_cifar10"; // resnet_cifar10 | resnet_cifar18 | small_conv |
                                           // small_conv_widened
    double r = 1.0;
    bool residual = true;
};

/// Field-for-field mirror of one experiment run. Names follow the
/// [Test]-[NetworkName] convention (NCT-, FFT-, VIZ-, OF-, BI- prefixes).
struct RunConfig {
    std::string name = "run";
    ArchCfg arch;
    std::string init_checkpoint; // non-empty: start from a teacher checkpoint
    OptimizerCfg optimizer;
    double weight_decay = 0;
    int batch_size = 128;
    int epochs = 10;
    std::vector<std::pair<int, double>> lr_drops;
    std::vector<TransformEvent> transforms;
    std::uint64_t seed = 1;
    std::string dtype = "f32"; // f32 | f64
    DatasetCfg dataset;
    std::string out_dir = "run_out";
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
void validate_run_config(const RunConfig& cfg);
std::string run_config_to_json(const RunConfig& cfg);

} // namespace fpt

#endif
