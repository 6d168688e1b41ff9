#include "trifusion/vision_encoder.hpp"

#include <algorithm>
#include <cmath>

#include "trifusion/error.hpp"
#include "trifusion/ops.hpp"

namespace trifusion {

namespace {

std::size_t exact_sqrt(std::size_t n) {
    auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    return r * r == n ? r : 0;
}

HeadProjection init_head(std::size_t width, Rng& rng) {
    return {uniform_param({width, width}, width, rng), uniform_param({width, width}, width, rng),
            uniform_param({width, width}, width, rng)};
}

void collect_head(const std::string& prefix, const HeadProjection& h, NamedTensors& out) {
    out.emplace_back(prefix + ".query", h.query);
    out.emplace_back(prefix + ".key", h.key);
    out.emplace_back(prefix + ".value", h.value);
}

std::size_t branch_count(BlockKind kind) { return kind == BlockKind::dual ? 2 : 1; }

}  // namespace

std::string to_string(AttentionMode mode) {
    switch (mode) {
        case AttentionMode::global: return "global";
        case AttentionMode::spatial: return "spatial";
        case AttentionMode::channel: return "channel";
        case AttentionMode::dual: return "dual";
    }
    return "dual";
}

AttentionMode parse_attention_mode(const std::string& text) {
    if (text == "global") return AttentionMode::global;
    if (text == "spatial") return AttentionMode::spatial;
    if (text == "channel") return AttentionMode::channel;
    if (text == "dual") return AttentionMode::dual;
    throw ConfigError("unknown attention mode '" + text + "'");
}

std::string to_string(WindowLayout layout) {
    return layout == WindowLayout::square ? "square" : "contiguous";
}

WindowLayout parse_window_layout(const std::string& text) {
    if (text == "contiguous") return WindowLayout::contiguous;
    if (text == "square") return WindowLayout::square;
    throw ConfigError("unknown window layout '" + text + "'");
}

std::string to_string(PositionalEncoding pe) {
    return pe == PositionalEncoding::learned ? "learned" : "sinusoidal";
}

PositionalEncoding parse_positional_encoding(const std::string& text) {
    if (text == "sinusoidal") return PositionalEncoding::sinusoidal;
    if (text == "learned") return PositionalEncoding::learned;
    throw ConfigError("unknown positional encoding '" + text + "'");
}

std::string to_string(BlockArrangement arrangement) {
    return arrangement == BlockArrangement::alternating ? "alternating" : "parallel";
}

BlockArrangement parse_block_arrangement(const std::string& text) {
    if (text == "parallel") return BlockArrangement::parallel;
    if (text == "alternating") return BlockArrangement::alternating;
    throw ConfigError("unknown block arrangement '" + text + "'");
}

void EncoderConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(image_channels, "image_channels");
    positive(channels, "channels");
    positive(heads, "heads");
    positive(windows, "windows");
    positive(groups, "groups");
    positive(ffn_mult, "ffn_mult");
    if (image_size % patch_size != 0) {
        throw ConfigError("patch_size " + std::to_string(patch_size) + " does not divide image_size " +
                          std::to_string(image_size));
    }
    if (channels % heads != 0) {
        throw ConfigError("heads " + std::to_string(heads) + " does not divide channels " +
                          std::to_string(channels) + " (C = C_h x N_h)");
    }
    if (patch_count() % windows != 0) {
        throw ConfigError("windows " + std::to_string(windows) + " does not divide patch count " +
                          std::to_string(patch_count()) + " (P = P_w x N_w)");
    }
    if (channels % groups != 0) {
        throw ConfigError("groups " + std::to_string(groups) + " does not divide channels " +
                          std::to_string(channels) + " (C = N_g x C_g)");
    }
    if (window_layout == WindowLayout::square) {
        const std::size_t side = exact_sqrt(window_patches());
        if (side == 0 || grid() % side != 0) {
            throw ConfigError("square windows need P_w = s*s with s dividing the patch grid; got P_w " +
                              std::to_string(window_patches()));
        }
    }
}

BlockKind block_kind(const EncoderConfig& cfg, std::size_t block) {
    if (cfg.arrangement == BlockArrangement::alternating) {
        return block % 2 == 0 ? BlockKind::spatial : BlockKind::channel;
    }
    switch (cfg.mode) {
        case AttentionMode::global: return BlockKind::global;
        case AttentionMode::spatial: return BlockKind::spatial;
        case AttentionMode::channel: return BlockKind::channel;
        case AttentionMode::dual: return BlockKind::dual;
    }
    return BlockKind::dual;
}

EncoderParams init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t c = cfg.channels;
    EncoderParams p;
    p.patch_projection = uniform_param({cfg.patch_dim(), c}, cfg.patch_dim(), rng);
    p.positions = sinusoidal_positions(cfg.patch_count(), c);
    p.positions.set_requires_grad(cfg.positional == PositionalEncoding::learned);
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        EncoderBlockParams blk;
        blk.kind = block_kind(cfg, b);
        if (blk.kind == BlockKind::global) {
            GlobalAttentionParams g;
            for (std::size_t h = 0; h < cfg.heads; ++h) g.heads.push_back(init_head(cfg.head_channels(), rng));
            blk.global = std::move(g);
        }
        if (blk.kind == BlockKind::spatial || blk.kind == BlockKind::dual) {
            blk.spatial = init_head(c, rng);
        }
        if (blk.kind == BlockKind::channel || blk.kind == BlockKind::dual) {
            ChannelAttentionParams ch;
            for (std::size_t g = 0; g < cfg.groups; ++g) ch.groups.push_back(init_head(cfg.group_channels(), rng));
            blk.channel = std::move(ch);
        }
        const std::size_t width = branch_count(blk.kind) * c;
        const std::size_t hidden = cfg.ffn_mult * c;
        blk.fuse_weight = uniform_param({width, c}, width, rng);
        blk.fuse_bias = Tensor::zeros({c}, true);
        blk.norm1_gain = Tensor::filled({c}, 1.0, true);
        blk.norm1_bias = Tensor::zeros({c}, true);
        blk.ffn_w1 = uniform_param({c, hidden}, c, rng);
        blk.ffn_b1 = Tensor::zeros({hidden}, true);
        blk.ffn_w2 = uniform_param({hidden, c}, hidden, rng);
        blk.ffn_b2 = Tensor::zeros({c}, true);
        blk.norm2_gain = Tensor::filled({c}, 1.0, true);
        blk.norm2_bias = Tensor::zeros({c}, true);
        p.blocks.push_back(std::move(blk));
    }
    p.normalization.mean.assign(cfg.image_channels, 0.0);
    p.normalization.stddev.assign(cfg.image_channels, 1.0);
    return p;
}

void EncoderParams::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".patch_projection", patch_projection);
    if (positions.requires_grad()) out.emplace_back(prefix + ".positions", positions);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& blk = blocks[b];
        const std::string bp = prefix + ".block" + std::to_string(b);
        if (blk.global) {
            for (std::size_t h = 0; h < blk.global->heads.size(); ++h)
                collect_head(bp + ".global.head" + std::to_string(h), blk.global->heads[h], out);
        }
        if (blk.spatial) collect_head(bp + ".spatial", *blk.spatial, out);
        if (blk.channel) {
            for (std::size_t g = 0; g < blk.channel->groups.size(); ++g)
                collect_head(bp + ".channel.group" + std::to_string(g), blk.channel->groups[g], out);
        }
        out.emplace_back(bp + ".fuse.weight", blk.fuse_weight);
        out.emplace_back(bp + ".fuse.bias", blk.fuse_bias);
        out.emplace_back(bp + ".norm1.gain", blk.norm1_gain);
        out.emplace_back(bp + ".norm1.bias", blk.norm1_bias);
        out.emplace_back(bp + ".ffn.w1", blk.ffn_w1);
        out.emplace_back(bp + ".ffn.b1", blk.ffn_b1);
        out.emplace_back(bp + ".ffn.w2", blk.ffn_w2);
        out.emplace_back(bp + ".ffn.b2", blk.ffn_b2);
        out.emplace_back(bp + ".norm2.gain", blk.norm2_gain);
        out.emplace_back(bp + ".norm2.bias", blk.norm2_bias);
    }
}

Tensor normalize_image(const Tensor& pixels, std::span<const double> mean,
                       std::span<const double> stddev) {
    if (pixels.rank() != 3) {
        throw ShapeError("normalize_image: expected H x W x ch, got " + shape_string(pixels.shape()));
    }
    const std::size_t ch = pixels.dim(2);
    if (mean.size() != ch || stddev.size() != ch) {
        throw ShapeError("normalize_image: " + std::to_string(ch) + " channels but " +
                         std::to_string(mean.size()) + " means / " + std::to_string(stddev.size()) +
                         " deviations");
    }
    for (std::size_t c = 0; c < ch; ++c) {
        if (!(stddev[c] > 0.0)) {
            throw DataError("normalize_image: degenerate channel " + std::to_string(c) +
                            " (standard deviation " + std::to_string(stddev[c]) + ")");
        }
    }
    const auto X = pixels.data();
    std::vector<double> y(X.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = (X[i] - mean[i % ch]) / stddev[i % ch];
    return Tensor::from(pixels.shape(), std::move(y));
}

PatchGrid embed_patches(const Tensor& image, const EncoderConfig& cfg, const Tensor& projection,
                        const Tensor& positions) {
    if (image.rank() != 3) {
        throw ShapeError("embed_patches: expected H x W x ch, got " + shape_string(image.shape()));
    }
    const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
    const std::size_t ps = cfg.patch_size;
    if (ps == 0 || h % ps != 0 || w % ps != 0) {
        throw ShapeError("embed_patches: image " + shape_string(image.shape()) +
                         " is not divisible into " + std::to_string(ps) + "x" + std::to_string(ps) +
                         " patches");
    }
    const std::size_t gh = h / ps, gw = w / ps, count = gh * gw, raw = ps * ps * ch;
    const auto X = image.data();
    std::vector<double> flat(count * raw);
    for (std::size_t py = 0; py < gh; ++py) {
        for (std::size_t px = 0; px < gw; ++px) {
            double* dst = flat.data() + (py * gw + px) * raw;
            for (std::size_t y = 0; y < ps; ++y) {
                const double* src = X.data() + ((py * ps + y) * w + px * ps) * ch;
                std::copy_n(src, ps * ch, dst + y * ps * ch);
            }
        }
    }
    PatchGrid grid;
    grid.count = count;
    grid.patches = Tensor::from({count, raw}, std::move(flat));
    grid.projected = ops::matmul(grid.patches, projection);
    grid.positions = positions;
    grid.embeddings = ops::add(grid.projected, positions);
    return grid;
}

BranchOutput global_attention(const Tensor& x, const GlobalAttentionParams& params,
                              std::size_t heads) {
    const std::size_t c = x.dim(1);
    if (heads == 0 || c % heads != 0 || params.heads.size() != heads) {
        throw ConfigError("global attention: " + std::to_string(heads) + " heads (" +
                          std::to_string(params.heads.size()) + " parameter sets) cannot split " +
                          std::to_string(c) + " channels");
    }
    const std::size_t ch = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(ch));
    std::vector<Tensor> outputs, weights;
    for (std::size_t i = 0; i < heads; ++i) {
        const auto& hp = params.heads[i];
        Tensor xi = ops::slice(x, 1, i * ch, ch);
        auto r = scaled_dot_attention(ops::matmul(xi, hp.query), ops::matmul(xi, hp.key),
                                      ops::matmul(xi, hp.value), scale);
        outputs.push_back(r.output);
        const std::size_t p = r.weights.dim(0);
        weights.push_back(ops::reshape(r.weights, {1, p, p}));
    }
    return {ops::concat(outputs, 1), ops::concat(weights, 0)};
}

std::vector<std::size_t> window_order(const EncoderConfig& cfg) {
    const std::size_t count = cfg.patch_count();
    std::vector<std::size_t> order(count);
    if (cfg.window_layout == WindowLayout::contiguous) {
        for (std::size_t i = 0; i < count; ++i) order[i] = i;
        return order;
    }
    const std::size_t side = exact_sqrt(cfg.window_patches());
    const std::size_t g = cfg.grid();
    const std::size_t tiles = g / side;
    std::size_t k = 0;
    for (std::size_t ty = 0; ty < tiles; ++ty)
        for (std::size_t tx = 0; tx < tiles; ++tx)
            for (std::size_t iy = 0; iy < side; ++iy)
                for (std::size_t ix = 0; ix < side; ++ix)
                    order[k++] = (ty * side + iy) * g + tx * side + ix;
    return order;
}

BranchOutput spatial_window_attention(const Tensor& x, const HeadProjection& params,
                                      const EncoderConfig& cfg) {
    const std::size_t p = x.dim(0), c = x.dim(1);
    const std::size_t nw = cfg.windows;
    if (nw == 0 || p % nw != 0) {
        throw ConfigError("spatial window attention: " + std::to_string(nw) +
                          " windows cannot partition " + std::to_string(p) + " patches");
    }
    const std::size_t pw = p / nw;
    const bool permuted = cfg.window_layout == WindowLayout::square;
    if (permuted && p != cfg.patch_count()) {
        throw ConfigError("spatial window attention: square windows need the configured " +
                          std::to_string(cfg.patch_count()) + " patches, got " + std::to_string(p));
    }
    Tensor q = ops::matmul(x, params.query);
    Tensor k = ops::matmul(x, params.key);
    Tensor v = ops::matmul(x, params.value);
    std::vector<std::size_t> order;
    if (permuted) {
        order = window_order(cfg);
        q = ops::gather_rows(q, order);
        k = ops::gather_rows(k, order);
        v = ops::gather_rows(v, order);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    std::vector<Tensor> outputs, weights;
    for (std::size_t w = 0; w < nw; ++w) {
        auto r = scaled_dot_attention(ops::slice(q, 0, w * pw, pw), ops::slice(k, 0, w * pw, pw),
                                      ops::slice(v, 0, w * pw, pw), scale);
        outputs.push_back(r.output);
        weights.push_back(ops::reshape(r.weights, {1, pw, pw}));
    }
    Tensor out = ops::concat(outputs, 0);
    if (permuted) {
        std::vector<std::size_t> inverse(p);
        for (std::size_t i = 0; i < p; ++i) inverse[order[i]] = i;
        out = ops::gather_rows(out, inverse);
    }
    return {out, ops::concat(weights, 0)};
}

BranchOutput channel_group_attention(const Tensor& x, const ChannelAttentionParams& params,
                                     const EncoderConfig& cfg) {
    const std::size_t c = x.dim(1);
    const std::size_t ng = cfg.groups;
    if (ng == 0 || c % ng != 0 || params.groups.size() != ng) {
        throw ConfigError("channel group attention: " + std::to_string(ng) + " groups (" +
                          std::to_string(params.groups.size()) + " parameter sets) cannot split " +
                          std::to_string(c) + " channels");
    }
    const std::size_t cg = c / ng;
    const double scale = 1.0 / std::sqrt(static_cast<double>(cg));
    std::vector<Tensor> outputs, weights;
    for (std::size_t g = 0; g < ng; ++g) {
        const auto& gp = params.groups[g];
        Tensor xg = ops::slice(x, 1, g * cg, cg);
        // Transposed tokens: each channel is a query over all P patches.
        auto r = scaled_dot_attention(ops::transpose(ops::matmul(xg, gp.query)),
                                      ops::transpose(ops::matmul(xg, gp.key)),
                                      ops::transpose(ops::matmul(xg, gp.value)), scale);
        outputs.push_back(ops::transpose(r.output));
        weights.push_back(ops::reshape(r.weights, {1, cg, cg}));
    }
    return {ops::concat(outputs, 1), ops::concat(weights, 0)};
}

BlockOutput encoder_block(const Tensor& x, const EncoderBlockParams& params,
                          const EncoderConfig& cfg) {
    BlockOutput out;
    std::vector<Tensor> branches;
    switch (params.kind) {
        case BlockKind::global:
            if (!params.global) throw ContractError("encoder block: missing global attention params");
            out.global = global_attention(x, *params.global, cfg.heads);
            branches.push_back(out.global->output);
            break;
        case BlockKind::spatial:
        case BlockKind::channel:
        case BlockKind::dual:
            if (params.kind != BlockKind::channel) {
                if (!params.spatial) throw ContractError("encoder block: missing spatial attention params");
                out.spatial = spatial_window_attention(x, *params.spatial, cfg);
                branches.push_back(out.spatial->output);
            }
            if (params.kind != BlockKind::spatial) {
                if (!params.channel) throw ContractError("encoder block: missing channel attention params");
                out.channel = channel_group_attention(x, *params.channel, cfg);
                branches.push_back(out.channel->output);
            }
            break;
    }
    out.fused = branches.size() == 1 ? branches.front() : ops::concat(branches, 1);
    out.projected = ops::add(ops::matmul(out.fused, params.fuse_weight), params.fuse_bias);
    Tensor h = ops::layer_norm(ops::add(x, out.projected), params.norm1_gain, params.norm1_bias);
    Tensor f = ops::add(ops::matmul(ops::gelu(ops::add(ops::matmul(h, params.ffn_w1), params.ffn_b1)),
                                    params.ffn_w2),
                        params.ffn_b2);
    out.output = ops::layer_norm(ops::add(h, f), params.norm2_gain, params.norm2_bias);
    return out;
}

EncoderOutput encode(const Tensor& image, const EncoderConfig& cfg, const EncoderParams& params) {
    cfg.validate();
    if (params.blocks.size() != cfg.depth) {
        throw ConfigError("encoder params hold " + std::to_string(params.blocks.size()) +
                          " blocks, config depth is " + std::to_string(cfg.depth));
    }
    if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
        image.dim(2) != cfg.image_channels) {
        throw ShapeError("encode: image " + shape_string(image.shape()) + " does not match config " +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_channels));
    }
    const auto& norm = params.normalization;
    Tensor normalized = norm.mean.empty() ? image : normalize_image(image, norm.mean, norm.stddev);

    EncoderOutput out;
    out.patches = embed_patches(normalized, cfg, params.patch_projection, params.positions);
    Tensor x = out.patches.embeddings;
    for (const auto& blk : params.blocks) {
        BlockOutput b = encoder_block(x, blk, cfg);
        out.fused.push_back(b.fused);
        out.attn_spatial.push_back(b.spatial ? b.spatial->weights : Tensor());
        out.attn_channel.push_back(b.channel ? b.channel->weights : Tensor());
        x = b.output;
    }
    out.features = x;
    return out;
}

std::vector<double> patch_saliency(const EncoderOutput& out, std::size_t block,
                                   const EncoderConfig& cfg) {
    if (block >= out.attn_spatial.size()) {
        throw ContractError("heatmap: block " + std::to_string(block) + " out of range (depth " +
                            std::to_string(out.attn_spatial.size()) + ")");
    }
    const Tensor& w = out.attn_spatial[block];
    if (!w.defined()) {
        throw ContractError("heatmap: block " + std::to_string(block) + " has no spatial window attention");
    }
    const std::size_t nw = w.dim(0), pw = w.dim(1);
    const auto order = window_order(cfg);
    if (order.size() != nw * pw) {
        throw ContractError("heatmap: attention covers " + std::to_string(nw * pw) +
                            " patches, config has " + std::to_string(order.size()));
    }
    const auto W = w.data();
    std::vector<double> saliency(nw * pw, 0.0);
    for (std::size_t win = 0; win < nw; ++win)
        for (std::size_t i = 0; i < pw; ++i)
            for (std::size_t j = 0; j < pw; ++j)
                saliency[order[win * pw + j]] += W[(win * pw + i) * pw + j];
    return saliency;
}

Tensor heatmap(const EncoderOutput& out, std::size_t block, const EncoderConfig& cfg) {
    auto s = patch_saliency(out, block, cfg);
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    const double min = *lo, range = *hi - *lo;
    for (double& v : s) v = range > 0.0 ? (v - min) / range : 0.0;
    const std::size_t g = cfg.grid();
    return Tensor::from({g, g}, std::move(s));
}

}  // namespace trifusion
