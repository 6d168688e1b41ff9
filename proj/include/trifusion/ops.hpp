#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "trifusion/tensor.hpp"

// Differentiable primitives. Every op records its backward rule when any
// input requires grad and grad mode is on. Shapes never broadcast except the
// bias form of add(): a rank-1 right operand sized to the last axis.
namespace trifusion::ops {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kLogClamp = 1e-12;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x multiplied by a one-element tensor.
Tensor scale(const Tensor& x, const Tensor& factor);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& shape);
// Rows of a rank-2 tensor picked (and possibly repeated) by index.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over axis 0 of a rank-2 tensor: [N x C] -> [C].
Tensor mean_rows(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
// Row softmax of a rank-2 tensor where `visible[r * cols + c] == false`
// entries are treated as -inf and receive exactly zero weight. Every row must
// keep at least one visible entry.
Tensor masked_softmax(const Tensor& x, const std::vector<bool>& visible);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);
// Rows scaled to unit L2 norm along the last axis.
Tensor l2_normalize(const Tensor& x);

// Mean token cross-entropy of [T x V] logits against target ids. Rows whose
// target equals `ignore_id` are skipped. The per-row loss is capped at
// -log(kLogClamp).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::optional<int> ignore_id = std::nullopt);

// Sum of values by recursive halving; keeps symmetric reductions exact.
double pairwise_sum(std::span<const double> values);

}  // namespace trifusion::ops
