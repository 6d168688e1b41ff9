#include "trifusion/attention.hpp"

#include "trifusion/error.hpp"
#include "trifusion/ops.hpp"

namespace trifusion {

namespace {
thread_local std::uint64_t attention_macs = 0;
}

void detail::add_attention_macs(std::uint64_t macs) { attention_macs += macs; }

FlopScope::FlopScope() : start_(attention_macs) {}

std::uint64_t FlopScope::macs() const { return attention_macs - start_; }

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     double scale, const std::vector<bool>* visible) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) ||
        k.dim(0) != v.dim(0)) {
        throw ShapeError("attention: incompatible q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
    }
    const std::uint64_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
    detail::add_attention_macs(nq * nk * d + nq * nk * dv);

    Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), scale);
    Tensor weights = visible ? ops::masked_softmax(scores, *visible) : ops::softmax(scores, 1);
    return {ops::matmul(weights, v), weights};
}

}  // namespace trifusion
