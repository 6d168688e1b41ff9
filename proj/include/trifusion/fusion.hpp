#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "trifusion/params.hpp"
#include "trifusion/tensor.hpp"

namespace trifusion {

inline constexpr double kDefaultTemperature = 0.07;

struct FusionParams {
    Tensor image_projection;  // C x D
    Tensor text_projection;   // C x D
    Tensor log_inv_temperature;  // scalar, similarity logits are scaled by exp() of it

    void collect(const std::string& prefix, NamedTensors& out) const;
};

FusionParams init_fusion_params(std::size_t channels, std::size_t embed_dim, double temperature,
                                Rng& rng);

struct JointEmbedding {
    Tensor image_vec;  // [D], unit norm
    Tensor text_vec;   // [D], unit norm
    Tensor fused;      // [2D], image then text
};

// Mean over rows, linear map to D, L2 normalization.
Tensor pool_and_project(const Tensor& features, const Tensor& projection);

// Image-then-text concatenation of two equal-width vectors.
Tensor fuse(const Tensor& image_vec, const Tensor& text_vec);

JointEmbedding joint_embedding(const Tensor& image_features, const Tensor& text_features,
                               const FusionParams& params);

// Symmetric InfoNCE over S = image_vecs text_vecs^T * inv_temperature, with
// matched pairs on the diagonal. `inv_temperature` is a one-element tensor.
Tensor contrastive_loss(const Tensor& image_vecs, const Tensor& text_vecs,
                        const Tensor& inv_temperature);
Tensor contrastive_loss(const Tensor& image_vecs, const Tensor& text_vecs, double temperature);

// Stacks [D] vectors into a [B x D] batch.
Tensor stack_rows(const std::vector<Tensor>& vectors);

// Fraction of rows whose diagonal similarity is the strict row maximum.
double retrieval_accuracy(const Tensor& image_vecs, const Tensor& text_vecs);

}  // namespace trifusion
