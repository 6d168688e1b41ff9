#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trifusion/attention.hpp"
#include "trifusion/params.hpp"
#include "trifusion/tensor.hpp"

namespace trifusion {

// Which attention branches an encoder block runs.
enum class AttentionMode { global, spatial, channel, dual };
// How patch indices are partitioned into windows.
enum class WindowLayout { contiguous, square };
enum class PositionalEncoding { sinusoidal, learned };
// parallel: every block holds the configured branches side by side.
// alternating: even blocks spatial-only, odd blocks channel-only.
enum class BlockArrangement { parallel, alternating };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& text);
std::string to_string(WindowLayout layout);
WindowLayout parse_window_layout(const std::string& text);
std::string to_string(PositionalEncoding pe);
PositionalEncoding parse_positional_encoding(const std::string& text);
std::string to_string(BlockArrangement arrangement);
BlockArrangement parse_block_arrangement(const std::string& text);

struct EncoderConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t image_channels = 3;
    std::size_t channels = 32;  // C
    std::size_t heads = 4;      // N_h, global attention
    std::size_t windows = 4;    // N_w, spatial window attention
    std::size_t groups = 4;     // N_g, channel group attention
    std::size_t depth = 1;
    std::size_t ffn_mult = 4;
    AttentionMode mode = AttentionMode::dual;
    WindowLayout window_layout = WindowLayout::contiguous;
    PositionalEncoding positional = PositionalEncoding::sinusoidal;
    BlockArrangement arrangement = BlockArrangement::parallel;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_size * patch_size * image_channels; }
    std::size_t head_channels() const { return channels / heads; }       // C_h
    std::size_t window_patches() const { return patch_count() / windows; }  // P_w
    std::size_t group_channels() const { return channels / groups; }     // C_g

    // Throws ConfigError naming the violated relation.
    void validate() const;
};

// Per-channel normalization constants applied before patch embedding.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

// Bias-free Q/K/V projections for one head, window or channel group.
struct HeadProjection {
    Tensor query;
    Tensor key;
    Tensor value;
};

struct GlobalAttentionParams {
    std::vector<HeadProjection> heads;  // each C_h x C_h on its channel slice
};

struct ChannelAttentionParams {
    std::vector<HeadProjection> groups;  // each C_g x C_g on its channel group
};

enum class BlockKind { global, spatial, channel, dual };

struct EncoderBlockParams {
    BlockKind kind = BlockKind::dual;
    std::optional<GlobalAttentionParams> global;
    std::optional<HeadProjection> spatial;  // C x C, single head per window
    std::optional<ChannelAttentionParams> channel;
    Tensor fuse_weight;  // (branches * C) x C
    Tensor fuse_bias;
    Tensor norm1_gain, norm1_bias;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor norm2_gain, norm2_bias;
};

struct EncoderParams {
    Tensor patch_projection;  // patch_dim x C
    Tensor positions;         // P x C; learnable only with learned positions
    std::vector<EncoderBlockParams> blocks;
    NormStats normalization;  // not learnable

    void collect(const std::string& prefix, NamedTensors& out) const;
};

BlockKind block_kind(const EncoderConfig& cfg, std::size_t block);
EncoderParams init_encoder_params(const EncoderConfig& cfg, Rng& rng);

struct PatchGrid {
    Tensor patches;     // P x patch_dim, raw flattened pixels
    Tensor projected;   // P x C, before positional encoding
    Tensor positions;   // P x C
    Tensor embeddings;  // projected + positions
    std::size_t count = 0;
};

struct BranchOutput {
    Tensor output;   // P x C
    Tensor weights;  // global: N_h x P x P; spatial: N_w x P_w x P_w; channel: N_g x C_g x C_g
};

struct BlockOutput {
    Tensor output;     // P x C
    Tensor fused;      // concatenated branches, P x (branches * C)
    Tensor projected;  // fused after the learned projection, before the residual
    std::optional<BranchOutput> global;
    std::optional<BranchOutput> spatial;
    std::optional<BranchOutput> channel;
};

struct EncoderOutput {
    Tensor features;  // P x C, input to the decoder and to pooling
    PatchGrid patches;
    std::vector<Tensor> fused;         // per block, P x 2C for dual blocks
    std::vector<Tensor> attn_spatial;  // per block, undefined if no spatial branch
    std::vector<Tensor> attn_channel;  // per block, undefined if no channel branch
};

// (pixels - mean) / std per channel over an [H x W x ch] image.
Tensor normalize_image(const Tensor& pixels, std::span<const double> mean,
                       std::span<const double> stddev);

PatchGrid embed_patches(const Tensor& image, const EncoderConfig& cfg, const Tensor& projection,
                        const Tensor& positions);

// Multi-head attention over all patches; head i attends over channel slice i
// with its own projections, heads concatenated.
BranchOutput global_attention(const Tensor& x, const GlobalAttentionParams& params,
                              std::size_t heads);

// Single-head attention inside each of N_w windows of P_w patches.
BranchOutput spatial_window_attention(const Tensor& x, const HeadProjection& params,
                                      const EncoderConfig& cfg);

// Attention over transposed tokens: C_g x C_g channel scores per group,
// aggregating across all patches.
BranchOutput channel_group_attention(const Tensor& x, const ChannelAttentionParams& params,
                                     const EncoderConfig& cfg);

BlockOutput encoder_block(const Tensor& x, const EncoderBlockParams& params,
                          const EncoderConfig& cfg);

EncoderOutput encode(const Tensor& image, const EncoderConfig& cfg, const EncoderParams& params);

// Patch order in which windows appear as contiguous runs of P_w indices.
std::vector<std::size_t> window_order(const EncoderConfig& cfg);

// Attention received by each patch (column sums of the block's window
// attention), in patch index order. Sums to P.
std::vector<double> patch_saliency(const EncoderOutput& out, std::size_t block,
                                   const EncoderConfig& cfg);

// Saliency min-max normalized to [0,1] on the grid x grid patch layout. A
// constant map normalizes to all zeros.
Tensor heatmap(const EncoderOutput& out, std::size_t block, const EncoderConfig& cfg);

}  // namespace trifusion
