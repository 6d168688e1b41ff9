#include "trifusion/scaling.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "trifusion/error.hpp"
#include "trifusion/params.hpp"
#include "trifusion/vision_encoder.hpp"

namespace trifusion {

namespace {

// Solves the (n x n) system in place by Gaussian elimination with partial pivoting.
std::vector<double> solve(std::vector<double> a, std::vector<double> b, std::size_t n) {
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
        }
        if (std::abs(a[pivot * n + col]) < 1e-300) throw ContractError("fit_polynomial: singular system");
        if (pivot != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a[col * n + j], a[pivot * n + j]);
            std::swap(b[col], b[pivot]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r * n + col] / a[col * n + col];
            for (std::size_t j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t i = n; i-- > 0;) {
        double acc = b[i];
        for (std::size_t j = i + 1; j < n; ++j) acc -= a[i * n + j] * x[j];
        x[i] = acc / a[i * n + i];
    }
    return x;
}

Tensor random_tensor(const Shape& shape, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from(shape, std::move(v));
}

}  // namespace

std::string to_string(AttentionKernel kernel) {
    switch (kernel) {
        case AttentionKernel::global: return "global";
        case AttentionKernel::windowed: return "windowed";
        case AttentionKernel::channel: return "channel";
    }
    return "global";
}

PolyFit fit_polynomial(std::span<const double> xs, std::span<const double> ys, std::size_t degree) {
    if (xs.size() != ys.size() || xs.size() <= degree) {
        throw ContractError("fit_polynomial: need more than " + std::to_string(degree) +
                            " paired samples");
    }
    const std::size_t n = degree + 1;
    // Normal equations on x scaled to [0,1] for conditioning.
    const double xmax = *std::max_element(xs.begin(), xs.end());
    std::vector<double> ata(n * n, 0.0), atb(n, 0.0);
    for (std::size_t s = 0; s < xs.size(); ++s) {
        std::vector<double> pw(n, 1.0);
        for (std::size_t k = 1; k < n; ++k) pw[k] = pw[k - 1] * (xs[s] / xmax);
        for (std::size_t i = 0; i < n; ++i) {
            atb[i] += pw[i] * ys[s];
            for (std::size_t j = 0; j < n; ++j) ata[i * n + j] += pw[i] * pw[j];
        }
    }
    std::vector<double> c = solve(ata, atb, n);
    for (std::size_t k = 1; k < n; ++k) c[k] /= std::pow(xmax, static_cast<double>(k));

    double mean = 0.0;
    for (double y : ys) mean += y;
    mean /= static_cast<double>(ys.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t s = 0; s < xs.size(); ++s) {
        double pred = 0.0, p = 1.0;
        for (std::size_t k = 0; k < n; ++k) {
            pred += c[k] * p;
            p *= xs[s];
        }
        ss_res += (ys[s] - pred) * (ys[s] - pred);
        ss_tot += (ys[s] - mean) * (ys[s] - mean);
    }
    return {std::move(c), ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 1.0};
}

ScalingReport run_scaling_bench(const ScalingOptions& options) {
    NoGradGuard no_grad;
    Rng rng(options.seed);
    const std::size_t c = options.channels;
    if (c % options.heads != 0 || c % options.group_channels != 0) {
        throw ConfigError("bench: heads and group_channels must divide channels");
    }
    const std::size_t ch = c / options.heads, cg = options.group_channels;

    GlobalAttentionParams global;
    for (std::size_t h = 0; h < options.heads; ++h) {
        global.heads.push_back({uniform_param({ch, ch}, ch, rng), uniform_param({ch, ch}, ch, rng),
                                uniform_param({ch, ch}, ch, rng)});
    }
    HeadProjection spatial{uniform_param({c, c}, c, rng), uniform_param({c, c}, c, rng),
                           uniform_param({c, c}, c, rng)};
    ChannelAttentionParams channel;
    for (std::size_t g = 0; g < c / cg; ++g) {
        channel.groups.push_back({uniform_param({cg, cg}, cg, rng), uniform_param({cg, cg}, cg, rng),
                                  uniform_param({cg, cg}, cg, rng)});
    }

    ScalingReport report;
    for (std::size_t p : options.patch_counts) {
        if (p % options.window_patches != 0) {
            throw ConfigError("bench: window_patches must divide every patch count");
        }
        EncoderConfig cfg;
        cfg.channels = c;
        cfg.heads = options.heads;
        cfg.windows = p / options.window_patches;
        cfg.groups = c / cg;
        const Tensor x = random_tensor({p, c}, rng);
        for (AttentionKernel kernel :
             {AttentionKernel::global, AttentionKernel::windowed, AttentionKernel::channel}) {
            ScalingRow row;
            row.patches = p;
            row.kernel = kernel;
            row.seconds = std::numeric_limits<double>::infinity();
            for (int r = 0; r < std::max(1, options.repeats); ++r) {
                FlopScope flops;
                const auto start = std::chrono::steady_clock::now();
                switch (kernel) {
                    case AttentionKernel::global: global_attention(x, global, options.heads); break;
                    case AttentionKernel::windowed: spatial_window_attention(x, spatial, cfg); break;
                    case AttentionKernel::channel: channel_group_attention(x, channel, cfg); break;
                }
                const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start;
                row.seconds = std::min(row.seconds, dt.count());
                row.macs = flops.macs();
            }
            report.rows.push_back(row);
        }
    }
    for (AttentionKernel kernel :
         {AttentionKernel::global, AttentionKernel::windowed, AttentionKernel::channel}) {
        std::vector<double> xs, ys;
        for (const auto& row : report.rows) {
            if (row.kernel != kernel) continue;
            xs.push_back(static_cast<double>(row.patches));
            ys.push_back(row.seconds);
        }
        KernelFit fit;
        fit.kernel = kernel;
        if (xs.size() >= 2) fit.linear = fit_polynomial(xs, ys, 1);
        if (xs.size() >= 3) fit.quadratic = fit_polynomial(xs, ys, 2);
        report.fits.push_back(fit);
    }
    return report;
}

std::string format_scaling_report(const ScalingReport& report) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %-10s %14s %16s\n", "P", "kernel", "seconds", "attn_macs");
    os << line;
    for (const auto& row : report.rows) {
        std::snprintf(line, sizeof line, "%-8zu %-10s %14.6e %16llu\n", row.patches,
                      to_string(row.kernel).c_str(), row.seconds,
                      static_cast<unsigned long long>(row.macs));
        os << line;
    }
    os << '\n';
    std::snprintf(line, sizeof line, "%-10s %12s %12s\n", "kernel", "R2_linear", "R2_quadratic");
    os << line;
    for (const auto& fit : report.fits) {
        std::snprintf(line, sizeof line, "%-10s %12.6f %12.6f\n", to_string(fit.kernel).c_str(),
                      fit.linear.r2, fit.quadratic.r2);
        os << line;
    }
    return os.str();
}

}  // namespace trifusion
