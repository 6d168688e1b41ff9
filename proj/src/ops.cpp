#include "trifusion/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "trifusion/error.hpp"

namespace trifusion::ops {

namespace {

using detail::Node;

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t dim = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.dim = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
    }
}

// Gradient sink for input i, or nullptr when that input is off the tape.
std::vector<double>* sink(const Node& out, std::size_t i) {
    Node& in = *out.inputs[i];
    return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace

double pairwise_sum(std::span<const double> values) {
    if (values.empty()) return 0.0;
    if (values.size() == 1) return values[0];
    if (values.size() == 2) return values[0] + values[1];
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* row = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    return Tensor::make_result({m, n}, std::move(c), {a, b}, [m, k, n](const Node& out) {
        const auto& dc = out.grad;
        const auto& A = out.inputs[0]->data;
        const auto& B = out.inputs[1]->data;
        if (auto* da = sink(out, 0)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += dc[i * n + j] * B[p * n + j];
                    (*da)[i * k + p] += acc;
                }
            }
        }
        if (auto* db = sink(out, 1)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) (*db)[p * n + j] += av * dc[i * n + j];
                }
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    const auto A = a.data();
    const auto B = b.data();
    if (a.shape() == b.shape()) {
        std::vector<double> c(A.size());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = A[i] + B[i];
        return Tensor::make_result(a.shape(), std::move(c), {a, b}, [](const Node& out) {
            for (std::size_t i : {0u, 1u}) {
                if (auto* d = sink(out, i)) {
                    for (std::size_t j = 0; j < out.grad.size(); ++j) (*d)[j] += out.grad[j];
                }
            }
        });
    }
    if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) {
        const std::size_t n = b.dim(0);
        std::vector<double> c(A.size());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = A[i] + B[i % n];
        return Tensor::make_result(a.shape(), std::move(c), {a, b}, [n](const Node& out) {
            if (auto* d = sink(out, 0)) {
                for (std::size_t j = 0; j < out.grad.size(); ++j) (*d)[j] += out.grad[j];
            }
            if (auto* d = sink(out, 1)) {
                for (std::size_t j = 0; j < out.grad.size(); ++j) (*d)[j % n] += out.grad[j];
            }
        });
    }
    throw ShapeError("add: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    const auto A = a.data();
    const auto B = b.data();
    std::vector<double> c(A.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = A[i] * B[i];
    return Tensor::make_result(a.shape(), std::move(c), {a, b}, [](const Node& out) {
        const auto& A = out.inputs[0]->data;
        const auto& B = out.inputs[1]->data;
        if (auto* d = sink(out, 0)) {
            for (std::size_t j = 0; j < out.grad.size(); ++j) (*d)[j] += out.grad[j] * B[j];
        }
        if (auto* d = sink(out, 1)) {
            for (std::size_t j = 0; j < out.grad.size(); ++j) (*d)[j] += out.grad[j] * A[j];
        }
    });
}

Tensor scale(const Tensor& x, double factor) {
    const auto X = x.data();
    std::vector<double> y(X.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = X[i] * factor;
    return Tensor::make_result(x.shape(), std::move(y), {x}, [factor](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t j = 0; j < out.grad.size(); ++j) d[j] += out.grad[j] * factor;
    });
}

Tensor scale(const Tensor& x, const Tensor& factor) {
    if (factor.size() != 1) {
        throw ShapeError("scale: factor must hold one element, got " +
                         shape_string(factor.shape()));
    }
    const double f = factor.item();
    const auto X = x.data();
    std::vector<double> y(X.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = X[i] * f;
    return Tensor::make_result(x.shape(), std::move(y), {x, factor}, [](const Node& out) {
        const auto& X = out.inputs[0]->data;
        const double f = out.inputs[1]->data[0];
        if (auto* d = sink(out, 0)) {
            for (std::size_t j = 0; j < out.grad.size(); ++j) (*d)[j] += out.grad[j] * f;
        }
        if (auto* d = sink(out, 1)) {
            double acc = 0.0;
            for (std::size_t j = 0; j < out.grad.size(); ++j) acc += out.grad[j] * X[j];
            (*d)[0] += acc;
        }
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    const AxisSplit base = split_axis(first, axis);
    std::vector<std::size_t> dims;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != first.size()) {
            throw ShapeError("concat: rank mismatch " + shape_string(first) + " vs " +
                             shape_string(p.shape()));
        }
        for (std::size_t i = 0; i < first.size(); ++i) {
            if (i != axis && p.shape()[i] != first[i]) {
                throw ShapeError("concat: shape mismatch " + shape_string(first) + " vs " +
                                 shape_string(p.shape()) + " off axis " + std::to_string(axis));
            }
        }
        dims.push_back(p.shape()[axis]);
        total += p.shape()[axis];
    }
    Shape shape = first;
    shape[axis] = total;
    const std::size_t outer = base.outer, inner = base.inner;
    std::vector<double> y(outer * total * inner);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto P = parts[k].data();
        const std::size_t run = dims[k] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(P.data() + o * run, run, y.data() + o * total * inner + offset * inner);
        }
        offset += dims[k];
    }
    return Tensor::make_result(std::move(shape), std::move(y), parts,
                               [dims, outer, inner, total](const Node& out) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < dims.size(); ++k) {
            const std::size_t run = dims[k] * inner;
            if (auto* d = sink(out, k)) {
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* g = out.grad.data() + o * total * inner + offset * inner;
                    for (std::size_t j = 0; j < run; ++j) (*d)[o * run + j] += g[j];
                }
            }
            offset += dims[k];
        }
    });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const AxisSplit s = split_axis(x.shape(), axis);
    if (length == 0 || start + length > s.dim) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of bounds for axis " +
                         std::to_string(axis) + " of " + shape_string(x.shape()));
    }
    Shape shape = x.shape();
    shape[axis] = length;
    const auto X = x.data();
    const std::size_t run = length * s.inner;
    std::vector<double> y(s.outer * run);
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(X.data() + o * s.dim * s.inner + start * s.inner, run, y.data() + o * run);
    }
    return Tensor::make_result(std::move(shape), std::move(y), {x}, [s, start, run](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t o = 0; o < s.outer; ++o) {
            double* dst = d.data() + o * s.dim * s.inner + start * s.inner;
            const double* g = out.grad.data() + o * run;
            for (std::size_t j = 0; j < run; ++j) dst[j] += g[j];
        }
    });
}

Tensor transpose(const Tensor& x) {
    require_rank(x, 2, "transpose");
    const std::size_t r = x.dim(0), c = x.dim(1);
    const auto X = x.data();
    std::vector<double> y(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y[j * r + i] = X[i * c + j];
    return Tensor::make_result({c, r}, std::move(y), {x}, [r, c](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) d[i * c + j] += out.grad[j * r + i];
    });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_size(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
    }
    std::vector<double> y(x.data().begin(), x.data().end());
    return Tensor::make_result(shape, std::move(y), {x}, [](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t j = 0; j < out.grad.size(); ++j) d[j] += out.grad[j];
    });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    require_rank(x, 2, "gather_rows");
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    if (idx.empty()) throw ShapeError("gather_rows: empty index list");
    const auto X = x.data();
    std::vector<double> y(idx.size() * c);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n) {
            throw ShapeError("gather_rows: row " + std::to_string(idx[r]) +
                             " out of range for " + shape_string(x.shape()));
        }
        std::copy_n(X.data() + idx[r] * c, c, y.data() + r * c);
    }
    return Tensor::make_result({idx.size(), c}, std::move(y), {x}, [idx, c](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < c; ++j) d[idx[r] * c + j] += out.grad[r * c + j];
    });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    require_rank(table, 2, "embedding_lookup");
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
            throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                             " out of range for table " + shape_string(table.shape()));
        }
        rows.push_back(static_cast<std::size_t>(id));
    }
    return gather_rows(table, rows);
}

Tensor gelu(const Tensor& x) {
    const auto X = x.data();
    std::vector<double> y(X.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = 0.5 * X[i] * (1.0 + std::erf(X[i] / std::numbers::sqrt2));
    }
    return Tensor::make_result(x.shape(), std::move(y), {x}, [](const Node& out) {
        const auto& X = out.inputs[0]->data;
        auto& d = *sink(out, 0);
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t j = 0; j < X.size(); ++j) {
            const double cdf = 0.5 * (1.0 + std::erf(X[j] / std::numbers::sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * X[j] * X[j]);
            d[j] += out.grad[j] * (cdf + X[j] * pdf);
        }
    });
}

Tensor exp(const Tensor& x) {
    const auto X = x.data();
    std::vector<double> y(X.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(X[i]);
    return Tensor::make_result(x.shape(), std::move(y), {x}, [](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t j = 0; j < out.grad.size(); ++j) d[j] += out.grad[j] * out.data[j];
    });
}

Tensor sum(const Tensor& x) {
    return Tensor::make_result({1}, {pairwise_sum(x.data())}, {x}, [](const Node& out) {
        auto& d = *sink(out, 0);
        for (double& v : d) v += out.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.size());
    return Tensor::make_result({1}, {pairwise_sum(x.data()) / n}, {x}, [n](const Node& out) {
        auto& d = *sink(out, 0);
        for (double& v : d) v += out.grad[0] / n;
    });
}

Tensor mean_rows(const Tensor& x) {
    require_rank(x, 2, "mean_rows");
    const std::size_t n = x.dim(0), c = x.dim(1);
    const auto X = x.data();
    std::vector<double> y(c, 0.0);
    std::vector<double> column(n);
    for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t i = 0; i < n; ++i) column[i] = X[i * c + j];
        y[j] = pairwise_sum(column) / static_cast<double>(n);
    }
    return Tensor::make_result({c}, std::move(y), {x}, [n, c](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) d[i * c + j] += out.grad[j] / static_cast<double>(n);
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis);
    const auto X = x.data();
    std::vector<double> y(X.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.dim * s.inner + in;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.dim; ++k) m = std::max(m, X[base + k * s.inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.dim; ++k) {
                const double e = std::exp(X[base + k * s.inner] - m);
                y[base + k * s.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < s.dim; ++k) y[base + k * s.inner] /= z;
        }
    }
    return Tensor::make_result(x.shape(), std::move(y), {x}, [s](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.dim * s.inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < s.dim; ++k) {
                    dot += out.grad[base + k * s.inner] * out.data[base + k * s.inner];
                }
                for (std::size_t k = 0; k < s.dim; ++k) {
                    const std::size_t i = base + k * s.inner;
                    d[i] += out.data[i] * (out.grad[i] - dot);
                }
            }
        }
    });
}

Tensor masked_softmax(const Tensor& x, const std::vector<bool>& visible) {
    require_rank(x, 2, "masked_softmax");
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (visible.size() != r * c) {
        throw ShapeError("masked_softmax: mask length " + std::to_string(visible.size()) +
                         " does not match " + shape_string(x.shape()));
    }
    const auto X = x.data();
    std::vector<double> y(X.size(), 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) {
            if (visible[i * c + j]) m = std::max(m, X[i * c + j]);
        }
        if (!std::isfinite(m)) {
            throw ContractError("masked_softmax: row " + std::to_string(i) + " is fully masked");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (!visible[i * c + j]) continue;
            y[i * c + j] = std::exp(X[i * c + j] - m);
            z += y[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= z;
    }
    return Tensor::make_result(x.shape(), std::move(y), {x}, [r, c](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += out.grad[i * c + j] * out.data[i * c + j];
            for (std::size_t j = 0; j < c; ++j) {
                d[i * c + j] += out.data[i * c + j] * (out.grad[i * c + j] - dot);
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t n = x.shape().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != n || bias.dim(0) != n) {
        throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match last axis of " +
                         shape_string(x.shape()));
    }
    const std::size_t rows = x.size() / n;
    const auto X = x.data();
    const auto G = gain.data();
    const auto B = bias.data();
    std::vector<double> y(X.size());
    std::vector<double> xhat(X.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = X.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (row[j] - mu) * inv_std[r];
            y[r * n + j] = G[j] * xhat[r * n + j] + B[j];
        }
    }
    return Tensor::make_result(x.shape(), std::move(y), {x, gain, bias},
                               [n, rows, xhat = std::move(xhat),
                                inv_std = std::move(inv_std)](const Node& out) {
        const auto& G = out.inputs[1]->data;
        if (auto* dg = sink(out, 1)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) (*dg)[j] += out.grad[r * n + j] * xhat[r * n + j];
        }
        if (auto* db = sink(out, 2)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) (*db)[j] += out.grad[r * n + j];
        }
        if (auto* dx = sink(out, 0)) {
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double dh = out.grad[r * n + j] * G[j];
                    mean_d += dh;
                    mean_dx += dh * xhat[r * n + j];
                }
                mean_d /= static_cast<double>(n);
                mean_dx /= static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const double dh = out.grad[r * n + j] * G[j];
                    (*dx)[r * n + j] += inv_std[r] * (dh - mean_d - xhat[r * n + j] * mean_dx);
                }
            }
        }
    });
}

Tensor l2_normalize(const Tensor& x) {
    constexpr double kMinNorm = 1e-12;
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    const auto X = x.data();
    std::vector<double> y(X.size());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += X[r * n + j] * X[r * n + j];
        norms[r] = std::max(std::sqrt(ss), kMinNorm);
        for (std::size_t j = 0; j < n; ++j) y[r * n + j] = X[r * n + j] / norms[r];
    }
    return Tensor::make_result(x.shape(), std::move(y), {x},
                               [n, rows, norms = std::move(norms)](const Node& out) {
        auto& d = *sink(out, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            if (norms[r] <= kMinNorm) {
                for (std::size_t j = 0; j < n; ++j) d[r * n + j] += out.grad[r * n + j] / kMinNorm;
                continue;
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += out.grad[r * n + j] * out.data[r * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                d[r * n + j] += (out.grad[r * n + j] - out.data[r * n + j] * dot) / norms[r];
            }
        }
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::optional<int> ignore_id) {
    require_rank(logits, 2, "cross_entropy");
    const std::size_t t = logits.dim(0), v = logits.dim(1);
    if (targets.size() != t) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(logits.shape()));
    }
    const double cap = -std::log(kLogClamp);
    const auto X = logits.data();
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<double> losses;
    std::vector<double> probs(X.size(), 0.0);
    std::vector<bool> counted(t, false);
    std::vector<bool> clamped(t, false);
    for (std::size_t r = 0; r < t; ++r) {
        if (ignore_id && tgt[r] == *ignore_id) continue;
        if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= v) {
            throw ShapeError("cross_entropy: target " + std::to_string(tgt[r]) +
                             " out of range for " + std::to_string(v) + " classes");
        }
        const double* row = X.data() + r * v;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[r * v + j] = std::exp(row[j] - m);
            z += probs[r * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
        double loss = (m - row[tgt[r]]) + std::log(z);
        if (loss > cap) {
            loss = cap;
            clamped[r] = true;
        }
        counted[r] = true;
        losses.push_back(loss);
    }
    if (losses.empty()) throw ContractError("cross_entropy: every target row is ignored");
    const double count = static_cast<double>(losses.size());
    const double value = pairwise_sum(losses) / count;
    return Tensor::make_result({1}, {value}, {logits},
                               [t, v, count, tgt = std::move(tgt), probs = std::move(probs),
                                counted = std::move(counted),
                                clamped = std::move(clamped)](const Node& out) {
        auto& d = *sink(out, 0);
        const double g = out.grad[0] / count;
        for (std::size_t r = 0; r < t; ++r) {
            if (!counted[r] || clamped[r]) continue;
            for (std::size_t j = 0; j < v; ++j) d[r * v + j] += g * probs[r * v + j];
            d[r * v + static_cast<std::size_t>(tgt[r])] -= g;
        }
    });
}

}  // namespace trifusion::ops
