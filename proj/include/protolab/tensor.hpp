#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace protolab {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;  // empty until touched by backward / accum
    bool requires_grad = false;
    std::uint64_t seq = 0;  // creation order; parents always have smaller seq
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0f);
    }
};

std::uint64_t next_seq();

}  // namespace detail

/// Whether newly created ops record adjoints. Off inside NoGradGuard scopes
/// (inference, finite differencing).
class GradMode {
public:
    static bool enabled();

    class NoGradGuard {
    public:
        NoGradGuard();
        ~NoGradGuard();
        NoGradGuard(const NoGradGuard&) = delete;

    private:
        bool prev_;
    };

private:
    static bool& flag();
};

/// Dense float32 tensor in row-major NCHW layout, handle to a tape node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0f, requires_grad); }
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0f, requires_grad); }
    static Tensor scalar(float value, bool requires_grad = false) { return full({1}, value, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return node_->numel(); }

    float* data() { return node_->values.data(); }
    const float* data() const { return node_->values.data(); }
    std::span<const float> values() const { return node_->values; }
    std::vector<float>& mutable_values() { return node_->values; }

    // 4-D accessors
    float& at(int n, int c, int h, int w);
    float at(int n, int c, int h, int w) const;
    float item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const float> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    /// Same values, detached from the tape.
    Tensor detach() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n);

private:
    std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Grads accumulate additively into
/// every requires_grad tensor reachable on the tape.
void backward(const Tensor& loss);

/// Max relative error between analytic gradient of f at x and central finite
/// differences with step h. f must be scalar-valued.
float grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float h);

namespace detail {
// Allocates an op output node; records parents/backward only when grad mode
// is on and some input requires grad.
Tensor make_op(Shape shape, std::vector<float> values,
               std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn);
void accum(Node& parent, std::span<const float> delta);
}  // namespace detail

}  // namespace protolab
