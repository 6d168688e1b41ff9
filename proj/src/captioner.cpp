#include "trifusion/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "trifusion/error.hpp"
#include "trifusion/ops.hpp"

namespace trifusion {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Valid prefix without EOS as decoder input, shifted prefix as targets.
std::pair<TokenSequence, std::vector<int>> teacher_forcing(const TokenSequence& caption) {
    const std::size_t n = caption.valid_length;
    if (n < 2) throw ContractError("caption needs at least BOS and EOS");
    TokenSequence input;
    input.ids.assign(caption.ids.begin(), caption.ids.begin() + static_cast<std::ptrdiff_t>(n - 1));
    input.valid_length = n - 1;
    std::vector<int> targets(caption.ids.begin() + 1, caption.ids.begin() + static_cast<std::ptrdiff_t>(n));
    return {std::move(input), std::move(targets)};
}

TokenSequence valid_prefix(const TokenSequence& caption) {
    TokenSequence s;
    s.ids.assign(caption.ids.begin(), caption.ids.begin() + static_cast<std::ptrdiff_t>(caption.valid_length));
    s.valid_length = caption.valid_length;
    return s;
}

Tensor text_embedding(const CaptionModel& model, const TokenSequence& caption) {
    auto out = decode_text(valid_prefix(caption), model.decoder.embedding, std::nullopt, model.decoder,
                           model.config.decoder);
    return pool_and_project(out.hidden, model.fusion.text_projection);
}

Tensor contrastive_term(const CaptionModel& model, const std::vector<Tensor>& image_vecs,
                        const std::vector<Example>& batch) {
    std::vector<Tensor> text_vecs;
    for (const auto& ex : batch) text_vecs.push_back(text_embedding(model, ex.caption));
    return contrastive_loss(stack_rows(image_vecs), stack_rows(text_vecs),
                            ops::exp(model.fusion.log_inv_temperature));
}

struct Beam {
    std::vector<int> ids;
    double log_prob = 0.0;
    bool done = false;

    double score(double alpha) const {
        return log_prob / std::pow(static_cast<double>(ids.size() - 1), alpha);
    }
};

Generation finish(const CaptionModel& model, std::vector<int> ids, double log_prob) {
    Generation g;
    g.tokens.ids = std::move(ids);
    g.tokens.valid_length = g.tokens.ids.size();
    g.text = model.vocab.decode(g.tokens.ids);
    g.log_prob = log_prob;
    return g;
}

int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

Generation greedy(const CaptionModel& model, const Tensor& features, const GenerateOptions& opt) {
    std::vector<int> ids{kBosId};
    double total = 0.0;
    for (std::size_t words = 0;; ++words) {
        const auto lp = next_token_log_probs(model, features, ids);
        const int next = words >= opt.max_len ? kEosId : argmax_lowest(lp);
        total += lp[static_cast<std::size_t>(next)];
        ids.push_back(next);
        if (next == kEosId) break;
    }
    return finish(model, std::move(ids), total);
}

Generation beam_search(const CaptionModel& model, const Tensor& features, const GenerateOptions& opt) {
    std::vector<Beam> beams{{{kBosId}, 0.0, false}};
    const double alpha = opt.length_penalty;
    auto better = [alpha](const Beam& a, const Beam& b) {
        const double sa = a.score(alpha), sb = b.score(alpha);
        if (sa != sb) return sa > sb;
        return a.ids < b.ids;
    };
    for (std::size_t words = 0; words <= opt.max_len; ++words) {
        std::vector<Beam> candidates;
        for (const auto& b : beams) {
            if (b.done) {
                candidates.push_back(b);
                continue;
            }
            const auto lp = next_token_log_probs(model, features, b.ids);
            for (std::size_t tok = 0; tok < lp.size(); ++tok) {
                if (lp[tok] == kNegInf) continue;
                if (words == opt.max_len && static_cast<int>(tok) != kEosId) continue;
                Beam nb{b.ids, b.log_prob + lp[tok], static_cast<int>(tok) == kEosId};
                nb.ids.push_back(static_cast<int>(tok));
                candidates.push_back(std::move(nb));
            }
        }
        const std::size_t keep = std::min(opt.beam_width, candidates.size());
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                          candidates.end(), better);
        candidates.resize(keep);
        beams = std::move(candidates);
        if (std::all_of(beams.begin(), beams.end(), [](const Beam& b) { return b.done; })) break;
    }
    return finish(model, beams.front().ids, beams.front().log_prob);
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(contrastive_weight >= 0.0) || !std::isfinite(contrastive_weight)) {
        throw ConfigError("contrastive_weight must be >= 0");
    }
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (beam_width == 0) throw ConfigError("beam_width must be >= 1");
    if (max_len == 0) throw ConfigError("max_len must be positive");
    if (!(length_penalty >= 0.0)) throw ConfigError("length_penalty must be >= 0");
}

void ModelConfig::validate() const {
    encoder.validate();
    decoder.validate();
    if (decoder.channels != encoder.channels) {
        throw ConfigError("decoder channels " + std::to_string(decoder.channels) +
                          " must equal encoder channels " + std::to_string(encoder.channels));
    }
    if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
}

NamedTensors CaptionModel::parameters() const {
    NamedTensors out;
    encoder.collect("encoder", out);
    decoder.collect("decoder", out);
    fusion.collect("fusion", out);
    return out;
}

CaptionModel init_model(const ModelConfig& cfg, Vocabulary vocab, double temperature,
                        std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    CaptionModel m;
    m.config = cfg;
    m.encoder = init_encoder_params(cfg.encoder, rng);
    m.decoder = init_decoder_params(cfg.decoder, vocab.size(), rng);
    m.fusion = init_fusion_params(cfg.encoder.channels, cfg.embed_dim, temperature, rng);
    m.vocab = std::move(vocab);
    return m;
}

AdamState AdamState::for_params(const NamedTensors& params) {
    AdamState s;
    for (const auto& [name, t] : params) {
        s.m.emplace_back(t.size(), 0.0);
        s.v.emplace_back(t.size(), 0.0);
    }
    return s;
}

void adam_step(const NamedTensors& params, AdamState& state, const TrainConfig& cfg) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                            " tensors, model has " + std::to_string(params.size()));
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].second;
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.size() || v.size() != p.size()) {
            throw ContractError("adam_step: moment shape mismatch for " + params[i].first);
        }
        const auto g = p.grad();
        auto theta = p.mutable_data();
        for (std::size_t k = 0; k < theta.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            theta[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

LossTerms compute_losses(const CaptionModel& model, const std::vector<Example>& batch,
                         const TrainConfig& cfg) {
    if (batch.empty()) throw ContractError("compute_losses: empty batch");
    const double lambda = cfg.contrastive_weight;
    if (batch.size() < 2 && lambda > 0.0) {
        throw ContractError("a batch of 1 has no negatives for the contrastive term (lambda = " +
                            std::to_string(lambda) + ")");
    }
    std::vector<Tensor> ce_parts, image_vecs;
    std::size_t target_count = 0;
    std::vector<std::size_t> counts;
    for (const auto& ex : batch) {
        const Tensor features = encode(ex.image, model.config.encoder, model.encoder).features;
        auto [input, targets] = teacher_forcing(ex.caption);
        auto out = decode_text(input, model.decoder.embedding, features, model.decoder,
                               model.config.decoder);
        ce_parts.push_back(ops::cross_entropy(out.logits, targets));
        counts.push_back(targets.size());
        target_count += targets.size();
        image_vecs.push_back(pool_and_project(features, model.fusion.image_projection));
    }
    // Token-weighted mean: each caption's mean CE scaled by its share of targets.
    std::vector<Tensor> weighted;
    for (std::size_t i = 0; i < ce_parts.size(); ++i) {
        weighted.push_back(ops::scale(ce_parts[i], static_cast<double>(counts[i]) /
                                                       static_cast<double>(target_count)));
    }
    LossTerms terms;
    terms.ce = weighted.size() == 1 ? weighted.front() : ops::sum(ops::concat(weighted, 0));
    if (lambda > 0.0) {
        terms.contrastive = contrastive_term(model, image_vecs, batch);
        terms.total = ops::add(terms.ce, ops::scale(terms.contrastive, lambda));
    } else {
        NoGradGuard no_grad;
        terms.contrastive = batch.size() < 2 ? Tensor::scalar(0.0)
                                             : contrastive_term(model, image_vecs, batch);
        terms.total = terms.ce;
    }
    return terms;
}

StepLosses train_step(CaptionModel& model, AdamState& adam, const std::vector<Example>& batch,
                      const TrainConfig& cfg) {
    const auto params = model.parameters();
    for (auto [name, t] : params) t.zero_grad();
    LossTerms terms = compute_losses(model, batch, cfg);
    terms.total.backward();
    adam_step(params, adam, cfg);
    return {terms.ce.item(), terms.contrastive.item(), terms.total.item()};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch) {
    if (batch_size == 0) throw ContractError("epoch_batches: batch_size must be positive");
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
    for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count; start += batch_size) {
        const std::size_t end = std::min(count, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

void train(CaptionModel& model, AdamState& adam, const std::vector<Example>& examples,
           const TrainConfig& cfg, const StepCallback& on_step, const EpochCallback& on_epoch) {
    cfg.validate();
    if (examples.empty()) throw DataError("train: no training examples");
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& idx : epoch_batches(examples.size(), cfg.batch_size, cfg.seed, epoch)) {
            std::vector<Example> batch;
            batch.reserve(idx.size());
            for (std::size_t i : idx) batch.push_back(examples[i]);
            const StepLosses losses = train_step(model, adam, batch, cfg);
            if (on_step) on_step(adam.step, losses);
        }
        if (on_epoch) on_epoch(epoch);
    }
}

Tensor image_features(const CaptionModel& model, const Tensor& image) {
    NoGradGuard no_grad;
    return encode(image, model.config.encoder, model.encoder).features;
}

Tensor image_embedding(const CaptionModel& model, const Tensor& image) {
    NoGradGuard no_grad;
    return pool_and_project(image_features(model, image), model.fusion.image_projection);
}

Tensor caption_embedding(const CaptionModel& model, const TokenSequence& caption) {
    NoGradGuard no_grad;
    return text_embedding(model, caption);
}

std::vector<double> next_token_log_probs(const CaptionModel& model, const Tensor& features,
                                         const std::vector<int>& prefix) {
    NoGradGuard no_grad;
    TokenSequence seq{prefix, prefix.size()};
    auto out = decode_text(seq, model.decoder.embedding, features, model.decoder, model.config.decoder);
    const std::size_t t = out.logits.dim(0), v = out.logits.dim(1);
    const auto row = out.logits.data().subspan((t - 1) * v, v);
    double mx = kNegInf;
    for (double x : row) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    const double log_z = mx + std::log(z);
    std::vector<double> lp(v);
    for (std::size_t i = 0; i < v; ++i) lp[i] = row[i] - log_z;
    lp[kPadId] = lp[kBosId] = lp[kUnkId] = kNegInf;
    return lp;
}

namespace {

void check_options(const CaptionModel& model, const GenerateOptions& options) {
    if (options.beam_width == 0) throw ConfigError("beam_width must be >= 1");
    if (options.max_len + 2 > model.config.decoder.max_positions) {
        throw ConfigError("max_len " + std::to_string(options.max_len) +
                          " leaves no room for BOS/EOS within max_positions " +
                          std::to_string(model.config.decoder.max_positions));
    }
}

}  // namespace

Generation generate(const CaptionModel& model, const Tensor& image, const GenerateOptions& options) {
    check_options(model, options);
    const Tensor features = image_features(model, image);
    return options.beam_width == 1 ? greedy(model, features, options)
                                   : beam_search(model, features, options);
}

Generation beam_generate(const CaptionModel& model, const Tensor& image, const GenerateOptions& options) {
    check_options(model, options);
    return beam_search(model, image_features(model, image), options);
}

std::string AblationVariant::name() const {
    return to_string(mode) + (contrastive ? "" : "-noclip");
}

std::vector<AblationVariant> ablation_variants() {
    std::vector<AblationVariant> out;
    for (auto mode : {AttentionMode::global, AttentionMode::spatial, AttentionMode::channel,
                      AttentionMode::dual}) {
        out.push_back({mode, true});
        out.push_back({mode, false});
    }
    return out;
}

AblationVariant parse_ablation_variant(const std::string& name) {
    for (const auto& v : ablation_variants()) {
        if (v.name() == name) return v;
    }
    throw ConfigError("unknown ablation variant '" + name +
                      "' (expected global|spatial|channel|dual, optionally suffixed -noclip)");
}

AblationResult ablate(const AblationVariant& variant, const ModelConfig& model_cfg,
                      const TrainConfig& train_cfg, const Vocabulary& vocab,
                      const std::vector<Example>& train_set, const std::vector<Tensor>& eval_images,
                      const std::vector<std::vector<std::string>>& eval_refs, const NormStats& stats) {
    if (eval_images.size() != eval_refs.size() || eval_images.empty()) {
        throw DataError("ablate: need a non-empty evaluation set with references for every image");
    }
    ModelConfig mc = model_cfg;
    mc.encoder.mode = variant.mode;
    TrainConfig tc = train_cfg;
    if (!variant.contrastive) tc.contrastive_weight = 0.0;

    CaptionModel model = init_model(mc, vocab, tc.temperature, tc.seed);
    model.encoder.normalization = stats;
    AdamState adam = AdamState::for_params(model.parameters());
    AblationResult result;
    result.variant = variant;
    train(model, adam, train_set, tc,
          [&](std::uint64_t, const StepLosses& l) { result.losses.push_back(l); });

    ScoredCorpus corpus;
    const GenerateOptions gen{tc.beam_width, tc.max_len, tc.length_penalty};
    for (std::size_t i = 0; i < eval_images.size(); ++i) {
        ScoredImage img;
        img.image_id = std::to_string(i);
        img.candidate = tokenize(generate(model, eval_images[i], gen).text);
        for (const auto& r : eval_refs[i]) img.references.push_back(tokenize(r));
        corpus.images.push_back(std::move(img));
    }
    result.report = score_corpus(corpus);
    return result;
}

}  // namespace trifusion
