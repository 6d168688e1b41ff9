#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace trifusion {

enum class AttentionKernel { global, windowed, channel };

std::string to_string(AttentionKernel kernel);

struct ScalingOptions {
    std::vector<std::size_t> patch_counts{64, 128, 256, 512};
    std::size_t channels = 64;
    std::size_t heads = 4;
    std::size_t window_patches = 16;  // P_w, held fixed while P grows
    std::size_t group_channels = 16;  // C_g
    int repeats = 5;
    std::uint64_t seed = 0;
};

struct ScalingRow {
    std::size_t patches = 0;
    AttentionKernel kernel = AttentionKernel::global;
    double seconds = 0.0;  // best of `repeats`
    std::uint64_t macs = 0;
};

// Least-squares polynomial y = c0 + c1 x + ... with its coefficient of
// determination.
struct PolyFit {
    std::vector<double> coefficients;
    double r2 = 0.0;
};

PolyFit fit_polynomial(std::span<const double> xs, std::span<const double> ys, std::size_t degree);

struct KernelFit {
    AttentionKernel kernel = AttentionKernel::global;
    PolyFit linear;
    PolyFit quadratic;
};

struct ScalingReport {
    std::vector<ScalingRow> rows;
    std::vector<KernelFit> fits;
};

// Times each attention kernel on random P x C inputs without gradient
// recording, on the calling thread.
ScalingReport run_scaling_bench(const ScalingOptions& options);

std::string format_scaling_report(const ScalingReport& report);

}  // namespace trifusion
