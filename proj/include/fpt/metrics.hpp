#ifndef FPT_METRICS_HPP
#define FPT_METRICS_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fpt/graph.hpp"
#include "fpt/image_io.hpp"

namespace fpt {

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

/// Per-example FLOP counts. A multiply-accumulate is 2 FLOPs; a training step
/// is costed at 3x the forward pass (backward ~ 2x forward).
struct FlopCount {
    long long forward_flops_per_example = 0;
    long long train_step_flops_per_example = 0;
};

namespace detail {

template <class T>
long long pipeline_flops(const std::vector<Stage<T>>& sigma, VolShape& s) {
    // one FLOP per output element per stage
    long long f = 0;
    for (const auto& st : sigma) {
        if (st.kind == StageKind::MaxPool || st.kind == StageKind::AvgPool) {
            s.h = pool_out_extent(s.h, st.pool_k, st.pool_stride, st.pool_pad);
            s.w = pool_out_extent(s.w, st.pool_k, st.pool_stride, st.pool_pad);
        }
        f += static_cast<long long>(s.c) * s.h * s.w;
    }
    return f;
}

} // namespace detail

/// Forward FLOPs for one example. Convolutions cost 2*Co*Ci*kh*kw*ho*wo,
/// biases, pipeline stages, fold terms and residual adds cost one FLOP per
/// output element or term.
template <class T>
FlopCount count_flops(const NetworkGraph<T>& net, const std::array<int, 3>& input_shape) {
    long long f = 0;
    std::vector<VolShape> out_shapes;
    VolShape cur{input_shape[0], input_shape[1], input_shape[2]};
    for (const auto& node : net.nodes) {
        const auto& w = node.conv.w;
        VolShape s;
        s.c = w.out_channels();
        s.h = conv_out_extent(cur.h, w.kh(), w.stride, w.padding);
        s.w = conv_out_extent(cur.w, w.kw(), w.stride, w.padding);
        f += 2LL * w.out_channels() * w.in_channels() * w.kh() * w.kw() * s.h * s.w;
        f += static_cast<long long>(s.c) * s.h * s.w; // bias
        f += detail::pipeline_flops(node.conv.sigma, s);
        if (node.shortcut_in) {
            const auto& sc = *node.shortcut_in;
            if (sc.kind == ShortcutKind::Projection) {
                const VolShape& src = out_shapes[static_cast<std::size_t>(sc.src_node)];
                const int ph = conv_out_extent(src.h, sc.proj.kh(), sc.proj.stride, sc.proj.padding);
                const int pw = conv_out_extent(src.w, sc.proj.kw(), sc.proj.stride, sc.proj.padding);
                f += 2LL * sc.proj.out_channels() * sc.proj.in_channels() * sc.proj.kh() *
                     sc.proj.kw() * ph * pw;
                f += static_cast<long long>(sc.proj.out_channels()) * ph * pw; // bias
            }
            if (sc.has_fold()) {
                long long terms = 0;
                for (const auto& row : sc.fold) terms += static_cast<long long>(row.size());
                f += terms * s.h * s.w;
            }
            f += static_cast<long long>(s.c) * s.h * s.w; // residual add
        }
        out_shapes.push_back(s);
        cur = s;
    }
    // head: global average pool, 1x1 fc conv, softmax
    f += static_cast<long long>(cur.c); // pool output elements
    f += 2LL * net.head.fc.w.out_channels() * net.head.fc.w.in_channels();
    f += net.head.fc.w.out_channels();  // bias
    f += net.head.fc.w.out_channels();  // softmax
    FlopCount fc;
    fc.forward_flops_per_example = f;
    fc.train_step_flops_per_example = 3 * f;
    return fc;
}

// ---------------------------------------------------------------------------
// Metrics recording
// ---------------------------------------------------------------------------

/// One per-epoch record of a training run.
struct MetricsRecord {
    int epoch = 0;
    long long cumulative_examples = 0;
    long long cumulative_train_flops = 0;
    double train_loss = 0;
    double train_acc = 0;
    double val_acc = 0;
    double wall_seconds = 0;
    std::string event; // transform tag, empty otherwise
};

/// Append-only per-run metrics log with CSV emission.
class RunLog {
public:
    void append(const MetricsRecord& rec) {
        if (!records_.empty()) {
            const auto& last = records_.back();
            if (rec.epoch < last.epoch)
                throw ConfigError("metrics records must be appended in epoch order");
            if (rec.cumulative_examples < last.cumulative_examples ||
                rec.cumulative_train_flops < last.cumulative_train_flops)
                throw ConfigError("cumulative metrics fields must be non-decreasing");
        }
        records_.push_back(rec);
    }

    const std::vector<MetricsRecord>& records() const { return records_; }

    static const char* csv_header() {
        return "epoch,examples,flops,train_loss,train_acc,val_acc,wall_s,event";
    }

    void write_csv(const std::string& path) const;
    static std::vector<MetricsRecord> parse_csv(const std::string& path);

private:
    std::vector<MetricsRecord> records_;
};

// ---------------------------------------------------------------------------
// Filter export
// ---------------------------------------------------------------------------

/// Writes the target node's filters as 8-bit images, min-max normalized per
/// filter: one RGB PPM per filter when C_in == 3, otherwise one grayscale PGM
/// per (filter, input channel) slice. Returns the paths written.
template <class T>
std::vector<std::string> export_filters(const NetworkGraph<T>& net, int node_id,
                                        const std::string& dir) {
    if (node_id < 0 || node_id >= static_cast<int>(net.nodes.size()))
        throw ConfigError("export_filters: node does not exist");
    const Tensor<T>& w = net.nodes[static_cast<std::size_t>(node_id)].conv.w.w;
    const int co = w.extent(0), ci = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    std::vector<std::string> paths;
    for (int f = 0; f < co; ++f) {
        T lo = w(f, 0, 0, 0), hi = lo;
        for (int c = 0; c < ci; ++c)
            for (int y = 0; y < kh; ++y)
                for (int x = 0; x < kw; ++x) {
                    lo = std::min(lo, w(f, c, y, x));
                    hi = std::max(hi, w(f, c, y, x));
                }
        auto quant = [&](T v) -> std::uint8_t {
            if (hi == lo) return 128;
            const T t = (v - lo) / (hi - lo) * T(255);
            const long r = std::lround(static_cast<double>(t));
            return static_cast<std::uint8_t>(r < 0 ? 0 : r > 255 ? 255 : r);
        };
        if (ci == 3) {
            std::vector<std::uint8_t> rgb(static_cast<std::size_t>(kh) * kw * 3);
            std::size_t p = 0;
            for (int y = 0; y < kh; ++y)
                for (int x = 0; x < kw; ++x)
                    for (int c = 0; c < 3; ++c) rgb[p++] = quant(w(f, c, y, x));
            const std::string path = dir + "/filter_" + std::to_string(f) + ".ppm";
            write_ppm(path, kw, kh, rgb);
            paths.push_back(path);
        } else {
            for (int c = 0; c < ci; ++c) {
                std::vector<std::uint8_t> gray(static_cast<std::size_t>(kh) * kw);
                std::size_t p = 0;
                for (int y = 0; y < kh; ++y)
                    for (int x = 0; x < kw; ++x) gray[p++] = quant(w(f, c, y, x));
                const std::string path =
                    dir + "/filter_" + std::to_string(f) + "_" + std::to_string(c) + ".pgm";
                write_pgm(path, kw, kh, gray);
                paths.push_back(path);
            }
        }
    }
    return paths;
}

} // namespace fpt

#endif
