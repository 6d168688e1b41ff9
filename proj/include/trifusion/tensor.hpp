#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace trifusion {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One value in the define-by-run graph. `seq` is the position on the
// per-thread tape: every node's inputs carry a smaller seq than the node.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Node&)> backward_fn;

    std::vector<double>& grad_buffer();
};

}  // namespace detail

// Dense row-major float64 array with optional participation in reverse-mode
// differentiation. Copies share the underlying storage (handle semantics).
class Tensor {
public:
    Tensor();

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor filled(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    std::size_t dim(std::size_t axis) const;

    std::span<const double> data() const;
    // In-place write access, for optimizers, checkpoint restore and finite
    // differences. Never used by graph operations.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t i) const { return data()[i]; }
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    // Gradient buffer; zeros of the right size when nothing was accumulated.
    std::vector<double> grad() const;
    void zero_grad();

    // Reverse pass from a scalar root over everything reachable on the tape.
    void backward() const;

    // Fresh leaf holding a copy of the data, detached from any graph.
    Tensor detach() const;

    bool defined() const { return static_cast<bool>(node_); }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    // Graph construction hook used by the op implementations.
    static Tensor make_result(Shape shape, std::vector<double> data,
                              std::vector<Tensor> inputs,
                              std::function<void(const detail::Node&)> backward_fn);
    detail::Node& node() const { return *node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node);
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

}  // namespace trifusion
