#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "trifusion/params.hpp"
#include "trifusion/tensor.hpp"

namespace trifusion {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kReservedIds = 4;

// Lowercases, drops ASCII punctuation and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

struct TokenSequence {
    std::vector<int> ids;
    std::size_t valid_length = 0;  // tokens up to and including EOS

    // BOS first, EOS terminating the valid prefix, PAD only afterwards, ids in range.
    void validate(std::size_t vocab_size) const;
    void pad_to(std::size_t length);
};

class Vocabulary {
public:
    Vocabulary() = default;
    // `tokens` are the non-reserved entries in id order (id = index + 4).
    explicit Vocabulary(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size() + kReservedIds; }
    int id(std::string_view token) const;
    const std::string& token(int id) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    // BOS + ids + EOS; unknown words become UNK.
    TokenSequence encode(std::string_view text) const;
    // Words of the valid prefix, reserved ids skipped, stopping at EOS.
    std::string decode(std::span<const int> ids) const;

    // One token per line; line n holds id n + 4.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// Frequency >= min_freq, ordered by frequency descending then lexicographically.
Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_freq);

struct DecoderConfig {
    std::size_t channels = 32;
    std::size_t heads = 4;
    std::size_t layers = 1;
    std::size_t ffn_mult = 4;
    std::size_t max_positions = 64;

    void validate() const;
};

// Bias-free multi-head projections, all C x C.
struct AttentionProjection {
    Tensor query, key, value, output;
};

struct DecoderLayerParams {
    AttentionProjection self_attn;
    AttentionProjection cross_attn;
    Tensor norm1_gain, norm1_bias;
    Tensor norm2_gain, norm2_bias;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor norm3_gain, norm3_bias;
};

struct DecoderParams {
    Tensor embedding;  // V x C, tied with the output head
    std::vector<DecoderLayerParams> layers;

    void collect(const std::string& prefix, NamedTensors& out) const;
};

DecoderParams init_decoder_params(const DecoderConfig& cfg, std::size_t vocab_size, Rng& rng);

struct DecoderOutput {
    Tensor hidden;  // T x C
    Tensor logits;  // T x V
    std::vector<Tensor> self_weights;   // per layer, heads x T x T
    std::vector<Tensor> cross_weights;  // per layer, heads x T x P' (when context is given)
};

// Causal self-attention (PAD keys hidden), optional cross-attention to
// `context` [P' x C], feed-forward, post-layer-norm; logits = hidden E^T.
// Without context the cross-attention sublayer contributes zero.
DecoderOutput decode_text(const TokenSequence& tokens, const Tensor& embedding,
                          const std::optional<Tensor>& context, const DecoderParams& params,
                          const DecoderConfig& cfg);

}  // namespace trifusion
