#pragma once

// Plain-loop attention used to cross-check the tensor implementation, plus
// small encoder configurations shared by the encoder tests and the
// acceptance gate.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "support/gradcheck.hpp"
#include "trifusion/vision_encoder.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const trifusion::Tensor& t) {
    Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t r = 0; r < m.size(); ++r)
        for (std::size_t c = 0; c < m[r].size(); ++c) m[r][c] = t.at(r, c);
    return m;
}

inline Matrix multiply(const Matrix& a, const Matrix& b) {
    Matrix out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

inline Matrix columns(const Matrix& m, std::size_t start, std::size_t count) {
    Matrix out(m.size());
    for (std::size_t r = 0; r < m.size(); ++r)
        out[r].assign(m[r].begin() + start, m[r].begin() + start + count);
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m[0].size(), std::vector<double>(m.size()));
    for (std::size_t r = 0; r < m.size(); ++r)
        for (std::size_t c = 0; c < m[r].size(); ++c) out[c][r] = m[r][c];
    return out;
}

// softmax(q k^T * scale) v, one query row at a time; scale defaults to 1/sqrt(d).
inline Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, double scale = 0.0) {
    if (scale == 0.0) scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
    Matrix out(q.size(), std::vector<double>(v[0].size(), 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<double> s(k.size());
        double mx = -1e300;
        for (std::size_t j = 0; j < k.size(); ++j) {
            double dot = 0;
            for (std::size_t d = 0; d < q[i].size(); ++d) dot += q[i][d] * k[j][d];
            s[j] = dot * scale;
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (double& x : s) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < k.size(); ++j)
            for (std::size_t d = 0; d < v[0].size(); ++d) out[i][d] += s[j] / z * v[j][d];
    }
    return out;
}

// Uniform(-1, 1) projections without gradients.
inline trifusion::HeadProjection random_projection(std::size_t width, std::mt19937_64& rng) {
    auto draw = [&] { return testsupport::random_tensor({width, width}, rng, -1, 1, false); };
    trifusion::HeadProjection p;
    p.query = draw();
    p.key = draw();
    p.value = draw();
    return p;
}

inline trifusion::GlobalAttentionParams random_global(std::size_t c, std::size_t heads, std::mt19937_64& rng) {
    trifusion::GlobalAttentionParams p;
    for (std::size_t h = 0; h < heads; ++h) p.heads.push_back(random_projection(c / heads, rng));
    return p;
}

inline trifusion::ChannelAttentionParams random_channel(std::size_t c, std::size_t groups, std::mt19937_64& rng) {
    trifusion::ChannelAttentionParams p;
    for (std::size_t g = 0; g < groups; ++g) p.groups.push_back(random_projection(c / groups, rng));
    return p;
}

// 8x8 RGB images cut into 2x2 patches: P = 16, C = 8.
inline trifusion::EncoderConfig toy_encoder(std::size_t depth = 1) {
    trifusion::EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 2;
    cfg.image_channels = 3;
    cfg.channels = 8;
    cfg.heads = 2;
    cfg.windows = 4;
    cfg.groups = 2;
    cfg.depth = depth;
    cfg.ffn_mult = 2;
    return cfg;
}

}  // namespace oracle
