#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "trifusion/fusion.hpp"
#include "trifusion/metrics.hpp"
#include "trifusion/params.hpp"
#include "trifusion/text_decoder.hpp"
#include "trifusion/vision_encoder.hpp"

namespace trifusion {

struct TrainConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 8;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double contrastive_weight = 0.5;  // lambda
    double temperature = kDefaultTemperature;
    std::uint64_t seed = 0;
    std::size_t beam_width = 1;
    std::size_t max_len = 12;  // caption words before EOS is forced
    double length_penalty = 0.7;

    // epochs may be 0 (initial checkpoint only); everything else positive.
    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    std::size_t embed_dim = 32;

    void validate() const;
};

struct CaptionModel {
    ModelConfig config;
    Vocabulary vocab;
    EncoderParams encoder;
    DecoderParams decoder;
    FusionParams fusion;

    // Every learnable tensor under its canonical name, in a fixed order.
    NamedTensors parameters() const;
};

CaptionModel init_model(const ModelConfig& cfg, Vocabulary vocab, double temperature,
                        std::uint64_t seed);

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t step = 0;

    static AdamState for_params(const NamedTensors& params);
};

// One bias-corrected Adam update from each tensor's accumulated gradient.
void adam_step(const NamedTensors& params, AdamState& state, const TrainConfig& cfg);

struct Example {
    Tensor image;  // H x W x ch in [0,1]; normalized inside the encoder
    TokenSequence caption;
};

struct LossTerms {
    Tensor ce;           // mean next-token cross-entropy over the batch's target tokens
    Tensor contrastive;  // symmetric InfoNCE; recorded without grad when lambda = 0
    Tensor total;        // ce + lambda * contrastive
};

// Teacher-forced losses for a batch. A batch of one with lambda > 0 is a
// ContractError; with lambda = 0 it reports a contrastive value of 0.
LossTerms compute_losses(const CaptionModel& model, const std::vector<Example>& batch,
                         const TrainConfig& cfg);

struct StepLosses {
    double ce = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
};

StepLosses train_step(CaptionModel& model, AdamState& adam, const std::vector<Example>& batch,
                      const TrainConfig& cfg);

// Batches in a per-epoch seeded order. A trailing batch of one joins the
// previous batch so every step keeps a negative for the contrastive term.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch);

using StepCallback = std::function<void(std::uint64_t step, const StepLosses&)>;
using EpochCallback = std::function<void(std::size_t epoch)>;

void train(CaptionModel& model, AdamState& adam, const std::vector<Example>& examples,
           const TrainConfig& cfg, const StepCallback& on_step = {},
           const EpochCallback& on_epoch = {});

struct GenerateOptions {
    std::size_t beam_width = 1;
    std::size_t max_len = 12;
    double length_penalty = 0.7;
};

struct Generation {
    TokenSequence tokens;  // BOS ... EOS
    std::string text;
    double log_prob = 0.0;
};

// Log-probabilities of the next token after `prefix`, with PAD, BOS and UNK
// set to -inf.
std::vector<double> next_token_log_probs(const CaptionModel& model, const Tensor& features,
                                         const std::vector<int>& prefix);

// Greedy decoding for beam_width 1, beam search otherwise. Beams rank by
// log-prob sum / length^length_penalty; ties go to the lower token ids.
Generation generate(const CaptionModel& model, const Tensor& image, const GenerateOptions& options);
// Beam search at any width, including 1.
Generation beam_generate(const CaptionModel& model, const Tensor& image, const GenerateOptions& options);

// Encoder features for an image with gradient recording off.
Tensor image_features(const CaptionModel& model, const Tensor& image);
// Unit vectors the contrastive term compares, without gradient recording.
Tensor image_embedding(const CaptionModel& model, const Tensor& image);
Tensor caption_embedding(const CaptionModel& model, const TokenSequence& caption);

struct AblationVariant {
    AttentionMode mode = AttentionMode::dual;
    bool contrastive = true;

    std::string name() const;  // "dual", "dual-noclip", ...
};

// {global, spatial, channel, dual} x {contrastive, none}.
std::vector<AblationVariant> ablation_variants();
AblationVariant parse_ablation_variant(const std::string& name);

struct AblationResult {
    AblationVariant variant;
    ScoreReport report;
    std::vector<StepLosses> losses;
};

// Trains the variant from scratch on `train_set` under the shared seed and
// scores greedy captions for `eval_images` against `eval_refs`.
AblationResult ablate(const AblationVariant& variant, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, const Vocabulary& vocab,
                      const std::vector<Example>& train_set, const std::vector<Tensor>& eval_images,
                      const std::vector<std::vector<std::string>>& eval_refs, const NormStats& stats);

}  // namespace trifusion
