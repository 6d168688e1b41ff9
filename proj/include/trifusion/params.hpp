#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "trifusion/tensor.hpp"

namespace trifusion {

// Learnable tensors keyed by canonical path ("encoder.block0.fuse.weight").
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

using Rng = std::mt19937_64;

// Weight drawn from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
Tensor uniform_param(const Shape& shape, std::size_t fan_in, Rng& rng);

// Fixed sinusoidal encoding: even columns sin(p / 10000^(2i/C)), odd cos.
Tensor sinusoidal_positions(std::size_t count, std::size_t channels);

}  // namespace trifusion
