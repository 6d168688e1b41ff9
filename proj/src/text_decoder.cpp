#include "trifusion/text_decoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include "trifusion/attention.hpp"
#include "trifusion/error.hpp"
#include "trifusion/ops.hpp"

namespace trifusion {

namespace {

struct MultiHeadResult {
    Tensor output;
    Tensor weights;
};

MultiHeadResult multi_head_attention(const Tensor& queries, const Tensor& memory,
                                     const AttentionProjection& proj, std::size_t heads,
                                     const std::vector<bool>* visible) {
    const std::size_t c = queries.dim(1);
    const std::size_t ch = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(ch));
    Tensor q = ops::matmul(queries, proj.query);
    Tensor k = ops::matmul(memory, proj.key);
    Tensor v = ops::matmul(memory, proj.value);
    std::vector<Tensor> outputs, weights;
    for (std::size_t h = 0; h < heads; ++h) {
        auto r = scaled_dot_attention(ops::slice(q, 1, h * ch, ch), ops::slice(k, 1, h * ch, ch),
                                      ops::slice(v, 1, h * ch, ch), scale, visible);
        outputs.push_back(r.output);
        weights.push_back(ops::reshape(r.weights, {1, r.weights.dim(0), r.weights.dim(1)}));
    }
    Tensor merged = heads == 1 ? outputs.front() : ops::concat(outputs, 1);
    return {ops::matmul(merged, proj.output), ops::concat(weights, 0)};
}

AttentionProjection init_projection(std::size_t c, Rng& rng) {
    return {uniform_param({c, c}, c, rng), uniform_param({c, c}, c, rng),
            uniform_param({c, c}, c, rng), uniform_param({c, c}, c, rng)};
}

void collect_projection(const std::string& prefix, const AttentionProjection& p, NamedTensors& out) {
    out.emplace_back(prefix + ".query", p.query);
    out.emplace_back(prefix + ".key", p.key);
    out.emplace_back(prefix + ".value", p.value);
    out.emplace_back(prefix + ".output", p.output);
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char raw : text) {
        const auto ch = static_cast<unsigned char>(raw);
        if (ch < 128 && std::isspace(ch)) {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
        } else if (ch < 128 && std::ispunct(ch)) {
            continue;
        } else {
            current.push_back(ch < 128 ? static_cast<char>(std::tolower(ch)) : raw);
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

void TokenSequence::validate(std::size_t vocab_size) const {
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
            throw VocabError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                             std::to_string(vocab_size));
        }
    }
    if (ids.empty() || ids.front() != kBosId) throw ContractError("token sequence must start with BOS");
    if (valid_length == 0 || valid_length > ids.size()) {
        throw ContractError("token sequence valid length " + std::to_string(valid_length) +
                            " outside [1, " + std::to_string(ids.size()) + "]");
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const bool pad = ids[i] == kPadId;
        if (pad != (i >= valid_length)) {
            throw ContractError("PAD must fill exactly the positions after the valid prefix");
        }
        if (ids[i] == kEosId && i + 1 != valid_length) {
            throw ContractError("EOS must terminate the valid prefix");
        }
        if (ids[i] == kBosId && i != 0) throw ContractError("BOS may only appear first");
    }
}

void TokenSequence::pad_to(std::size_t length) {
    if (ids.size() < length) ids.resize(length, kPadId);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty()) throw DataError("vocabulary entry " + std::to_string(i) + " is empty");
        if (!index_.emplace(tokens_[i], static_cast<int>(i) + kReservedIds).second) {
            throw DataError("duplicate vocabulary entry '" + tokens_[i] + "'");
        }
    }
}

int Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
    static const std::string reserved[kReservedIds] = {"<pad>", "<bos>", "<eos>", "<unk>"};
    if (id >= 0 && id < kReservedIds) return reserved[id];
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
        throw VocabError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                         std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id - kReservedIds)];
}

TokenSequence Vocabulary::encode(std::string_view text) const {
    TokenSequence seq;
    seq.ids.push_back(kBosId);
    for (const auto& w : tokenize(text)) seq.ids.push_back(id(w));
    seq.ids.push_back(kEosId);
    seq.valid_length = seq.ids.size();
    return seq;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
    std::string text;
    for (int id : ids) {
        if (id == kEosId) break;
        if (id == kPadId || id == kBosId) continue;
        if (!text.empty()) text.push_back(' ');
        text += token(id);
    }
    return text;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary file " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
}

Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t min_freq) {
    if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& caption : corpus)
        for (auto& w : tokenize(caption)) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [w, n] : counts) {
        if (n >= min_freq) kept.emplace_back(w, n);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [w, n] : kept) tokens.push_back(std::move(w));
    return Vocabulary(std::move(tokens));
}

void DecoderConfig::validate() const {
    if (channels == 0 || heads == 0 || layers == 0 || ffn_mult == 0 || max_positions == 0) {
        throw ConfigError("decoder dimensions must be positive");
    }
    if (channels % heads != 0) {
        throw ConfigError("decoder_heads " + std::to_string(heads) + " does not divide channels " +
                          std::to_string(channels));
    }
}

DecoderParams init_decoder_params(const DecoderConfig& cfg, std::size_t vocab_size, Rng& rng) {
    cfg.validate();
    const std::size_t c = cfg.channels, hidden = cfg.ffn_mult * cfg.channels;
    DecoderParams p;
    p.embedding = uniform_param({vocab_size, c}, c, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        DecoderLayerParams layer;
        layer.self_attn = init_projection(c, rng);
        layer.cross_attn = init_projection(c, rng);
        layer.norm1_gain = Tensor::filled({c}, 1.0, true);
        layer.norm1_bias = Tensor::zeros({c}, true);
        layer.norm2_gain = Tensor::filled({c}, 1.0, true);
        layer.norm2_bias = Tensor::zeros({c}, true);
        layer.ffn_w1 = uniform_param({c, hidden}, c, rng);
        layer.ffn_b1 = Tensor::zeros({hidden}, true);
        layer.ffn_w2 = uniform_param({hidden, c}, hidden, rng);
        layer.ffn_b2 = Tensor::zeros({c}, true);
        layer.norm3_gain = Tensor::filled({c}, 1.0, true);
        layer.norm3_bias = Tensor::zeros({c}, true);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

void DecoderParams::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".embedding", embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        const std::string lp = prefix + ".layer" + std::to_string(l);
        collect_projection(lp + ".self_attn", layer.self_attn, out);
        collect_projection(lp + ".cross_attn", layer.cross_attn, out);
        out.emplace_back(lp + ".norm1.gain", layer.norm1_gain);
        out.emplace_back(lp + ".norm1.bias", layer.norm1_bias);
        out.emplace_back(lp + ".norm2.gain", layer.norm2_gain);
        out.emplace_back(lp + ".norm2.bias", layer.norm2_bias);
        out.emplace_back(lp + ".ffn.w1", layer.ffn_w1);
        out.emplace_back(lp + ".ffn.b1", layer.ffn_b1);
        out.emplace_back(lp + ".ffn.w2", layer.ffn_w2);
        out.emplace_back(lp + ".ffn.b2", layer.ffn_b2);
        out.emplace_back(lp + ".norm3.gain", layer.norm3_gain);
        out.emplace_back(lp + ".norm3.bias", layer.norm3_bias);
    }
}

DecoderOutput decode_text(const TokenSequence& tokens, const Tensor& embedding,
                          const std::optional<Tensor>& context, const DecoderParams& params,
                          const DecoderConfig& cfg) {
    cfg.validate();
    if (embedding.rank() != 2 || embedding.dim(1) != cfg.channels) {
        throw ShapeError("decode_text: embedding " + shape_string(embedding.shape()) +
                         " does not have " + std::to_string(cfg.channels) + " channels");
    }
    tokens.validate(embedding.dim(0));
    const std::size_t t = tokens.ids.size();
    if (t > cfg.max_positions) {
        throw ContractError("decode_text: sequence of " + std::to_string(t) +
                            " tokens exceeds max_positions " + std::to_string(cfg.max_positions));
    }
    if (context && (context->rank() != 2 || context->dim(1) != cfg.channels)) {
        throw ShapeError("decode_text: context " + shape_string(context->shape()) +
                         " does not have " + std::to_string(cfg.channels) + " channels");
    }

    std::vector<bool> visible(t * t, false);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) visible[i * t + j] = tokens.ids[j] != kPadId;

    DecoderOutput out;
    Tensor x = ops::add(ops::embedding_lookup(embedding, tokens.ids),
                        sinusoidal_positions(t, cfg.channels));
    for (const auto& layer : params.layers) {
        auto self = multi_head_attention(x, x, layer.self_attn, cfg.heads, &visible);
        out.self_weights.push_back(self.weights);
        Tensor h = ops::layer_norm(ops::add(x, self.output), layer.norm1_gain, layer.norm1_bias);
        if (context) {
            auto cross = multi_head_attention(h, *context, layer.cross_attn, cfg.heads, nullptr);
            out.cross_weights.push_back(cross.weights);
            h = ops::add(h, cross.output);
        }
        h = ops::layer_norm(h, layer.norm2_gain, layer.norm2_bias);
        Tensor f = ops::add(
            ops::matmul(ops::gelu(ops::add(ops::matmul(h, layer.ffn_w1), layer.ffn_b1)), layer.ffn_w2),
            layer.ffn_b2);
        x = ops::layer_norm(ops::add(h, f), layer.norm3_gain, layer.norm3_bias);
    }
    out.hidden = x;
    out.logits = ops::matmul(x, ops::transpose(embedding));
    return out;
}

}  // namespace trifusion
