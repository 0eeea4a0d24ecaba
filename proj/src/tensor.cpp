#include "protolab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace protolab {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

namespace detail {

std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

}  // namespace detail

bool& GradMode::flag() {
    thread_local bool enabled = true;
    return enabled;
}

bool GradMode::enabled() { return flag(); }

GradMode::NoGradGuard::NoGradGuard() : prev_(flag()) { flag() = false; }
GradMode::NoGradGuard::~NoGradGuard() { flag() = prev_; }

Tensor::Tensor(Shape shape, bool requires_grad) {
    node_ = std::make_shared<detail::Node>();
    node_->values.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.node_->values.begin(), t.node_->values.end(), value);
    return t;
}

float& Tensor::at(int n, int c, int h, int w) {
    const Shape& s = node_->shape;
    return node_->values[static_cast<std::size_t>(((n * s[1] + c) * s[2] + h) * s[3] + w)];
}

float Tensor::at(int n, int c, int h, int w) const {
    return const_cast<Tensor*>(this)->at(n, c, h, w);
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->values[0];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    t.node_->requires_grad = false;
    t.node_->seq = detail::next_seq();
    return t;
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

namespace detail {

Tensor make_op(Shape shape, std::vector<float> values,
               std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
    bool any_grad = false;
    for (const Tensor& in : inputs) any_grad = any_grad || in.requires_grad();
    Tensor out(std::move(shape), std::move(values), false);
#ifndef NDEBUG
    for (float v : out.values())
        if (!std::isfinite(v))
            throw std::runtime_error("non-finite value produced by forward op");
#endif
    if (any_grad && GradMode::enabled()) {
        Node& n = *out.node();
        n.requires_grad = true;
        n.parents.reserve(inputs.size());
        for (const Tensor& in : inputs) n.parents.push_back(in.node());
        n.backward_fn = std::move(backward_fn);
    }
    return out;
}

void accum(Node& parent, std::span<const float> delta) {
    parent.ensure_grad();
    for (std::size_t i = 0; i < delta.size(); ++i) parent.grad[i] += delta[i];
}

}  // namespace detail

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    // Collect the reachable subgraph; seq order is a topological order by
    // construction (parents are created before their consumers).
    std::vector<detail::Node*> nodes;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::shared_ptr<detail::Node>> stack{loss.node()};
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        nodes.push_back(n.get());
        for (auto& p : n->parents) stack.push_back(p);
    }
    std::sort(nodes.begin(), nodes.end(),
              [](detail::Node* a, detail::Node* b) { return a->seq > b->seq; });
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0f;
    for (detail::Node* n : nodes) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

float grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, float h) {
    Tensor probe(x.shape(), std::vector<float>(x.values().begin(), x.values().end()), true);
    Tensor y = f(probe);
    backward(y);
    std::vector<float> analytic(probe.grad().begin(), probe.grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(x.numel()), 0.0f);

    float max_err = 0.0f;
    GradMode::NoGradGuard ng;
    Tensor base = x.detach();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        float saved = base.data()[i];
        base.data()[i] = saved + h;
        double fp = f(base).item();
        base.data()[i] = saved - h;
        double fm = f(base).item();
        base.data()[i] = saved;
        double numeric = (fp - fm) / (2.0 * h);
        double a = analytic[static_cast<std::size_t>(i)];
        double err = std::abs(a - numeric) /
                     std::max(1e-8, std::abs(a) + std::abs(numeric));
        max_err = std::max(max_err, static_cast<float>(err));
    }
    return max_err;
}

}  // namespace protolab
