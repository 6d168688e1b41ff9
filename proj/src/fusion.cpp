#include "trifusion/fusion.hpp"

#include <cmath>
#include <numeric>

#include "trifusion/error.hpp"
#include "trifusion/ops.hpp"

namespace trifusion {

void FusionParams::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".image_projection", image_projection);
    out.emplace_back(prefix + ".text_projection", text_projection);
    out.emplace_back(prefix + ".log_inv_temperature", log_inv_temperature);
}

FusionParams init_fusion_params(std::size_t channels, std::size_t embed_dim, double temperature,
                                Rng& rng) {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    return {uniform_param({channels, embed_dim}, channels, rng),
            uniform_param({channels, embed_dim}, channels, rng),
            Tensor::scalar(std::log(1.0 / temperature), true)};
}

Tensor pool_and_project(const Tensor& features, const Tensor& projection) {
    if (features.rank() != 2) {
        throw ShapeError("pool_and_project: expected N x C features, got " +
                         shape_string(features.shape()));
    }
    Tensor pooled = ops::reshape(ops::mean_rows(features), {1, features.dim(1)});
    Tensor projected = ops::matmul(pooled, projection);
    return ops::reshape(ops::l2_normalize(projected), {projection.dim(1)});
}

Tensor fuse(const Tensor& image_vec, const Tensor& text_vec) {
    if (image_vec.rank() != 1 || image_vec.shape() != text_vec.shape()) {
        throw ShapeError("fuse: width mismatch " + shape_string(image_vec.shape()) + " vs " +
                         shape_string(text_vec.shape()));
    }
    return ops::concat({image_vec, text_vec}, 0);
}

JointEmbedding joint_embedding(const Tensor& image_features, const Tensor& text_features,
                               const FusionParams& params) {
    JointEmbedding e;
    e.image_vec = pool_and_project(image_features, params.image_projection);
    e.text_vec = pool_and_project(text_features, params.text_projection);
    e.fused = fuse(e.image_vec, e.text_vec);
    return e;
}

Tensor contrastive_loss(const Tensor& image_vecs, const Tensor& text_vecs,
                        const Tensor& inv_temperature) {
    if (image_vecs.rank() != 2 || image_vecs.shape() != text_vecs.shape()) {
        throw ShapeError("contrastive_loss: batches " + shape_string(image_vecs.shape()) + " and " +
                         shape_string(text_vecs.shape()) + " differ");
    }
    const std::size_t b = image_vecs.dim(0);
    if (b < 2) throw ContractError("contrastive_loss: batch of " + std::to_string(b) + " has no negatives");
    if (!(inv_temperature.item() > 0.0) || !std::isfinite(inv_temperature.item())) {
        throw ContractError("contrastive_loss: temperature must be positive");
    }
    std::vector<int> diagonal(b);
    std::iota(diagonal.begin(), diagonal.end(), 0);
    Tensor sim = ops::scale(ops::matmul(image_vecs, ops::transpose(text_vecs)), inv_temperature);
    Tensor rows = ops::cross_entropy(sim, diagonal);
    Tensor cols = ops::cross_entropy(ops::transpose(sim), diagonal);
    return ops::scale(ops::add(rows, cols), 0.5);
}

Tensor contrastive_loss(const Tensor& image_vecs, const Tensor& text_vecs, double temperature) {
    if (!(temperature > 0.0)) throw ContractError("contrastive_loss: temperature must be positive");
    return contrastive_loss(image_vecs, text_vecs, Tensor::scalar(1.0 / temperature));
}

Tensor stack_rows(const std::vector<Tensor>& vectors) {
    if (vectors.empty()) throw ShapeError("stack_rows: no vectors");
    std::vector<Tensor> rows;
    rows.reserve(vectors.size());
    for (const auto& v : vectors) rows.push_back(ops::reshape(v, {1, v.size()}));
    return ops::concat(rows, 0);
}

double retrieval_accuracy(const Tensor& image_vecs, const Tensor& text_vecs) {
    NoGradGuard no_grad;
    Tensor sim = ops::matmul(image_vecs, ops::transpose(text_vecs));
    const std::size_t b = sim.dim(0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < b; ++i) {
        bool best = true;
        for (std::size_t j = 0; j < b; ++j) {
            if (j != i && sim.at(i, j) >= sim.at(i, i)) best = false;
        }
        hits += best ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(b);
}

}  // namespace trifusion
