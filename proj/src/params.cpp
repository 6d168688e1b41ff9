#include "trifusion/params.hpp"

#include <cmath>

namespace trifusion {

Tensor uniform_param(const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = dist(rng);
    return Tensor::from(shape, std::move(values), true);
}

Tensor sinusoidal_positions(std::size_t count, std::size_t channels) {
    std::vector<double> pe(count * channels);
    for (std::size_t p = 0; p < count; ++p) {
        for (std::size_t j = 0; j < channels; ++j) {
            const double pair = static_cast<double>(j / 2 * 2);
            const double angle =
                static_cast<double>(p) / std::pow(10000.0, pair / static_cast<double>(channels));
            pe[p * channels + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return Tensor::from({count, channels}, std::move(pe));
}

}  // namespace trifusion
