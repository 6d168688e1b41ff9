#pragma once

#include <cstdint>
#include <vector>

#include "trifusion/tensor.hpp"

namespace trifusion {

// Multiply-accumulate tally of attention cores (the score product and the
// weighted sum of values) executed on the calling thread. Projections are
// not counted.
class FlopScope {
public:
    FlopScope();
    std::uint64_t macs() const;

private:
    std::uint64_t start_;
};

namespace detail {
void add_attention_macs(std::uint64_t macs);
}

struct AttentionResult {
    Tensor output;
    Tensor weights;
};

// softmax(q k^T * scale) v over rows. `visible`, when given, is a row-major
// [rows(q) x rows(k)] mask; hidden entries get exactly zero weight.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     double scale, const std::vector<bool>* visible = nullptr);

}  // namespace trifusion
