#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>

#include "bmf/common.hpp"

namespace bmf {

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
}

template <typename T>
struct TensorNode {
    std::vector<int64_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on demand, same length as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void()> backprop;  // accumulates this->grad into parents' grad

    int64_t numel() const { return shape_numel(shape); }
    void ensure_grad() {
        if ((int64_t)grad.size() != numel()) grad.assign(numel(), T(0));
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor with reverse-mode autodiff. Cheap to copy (shared
// node). Values are immutable once created; the exceptions are gradient
// accumulation and optimizer updates on leaf parameters.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(t.node_->numel(), T(0));
        return t;
    }

    static Tensor full(std::vector<int64_t> shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<T> data) {
        check(shape_numel(shape) == (int64_t)data.size(), "tensor: shape ", shape_str(shape),
              " does not match data length ", data.size());
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, T mean = T(0), T stddev = T(1)) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& x : t.node_->value) x = mean + stddev * T(dist(rng));
        return t;
    }

    static Tensor randu(std::vector<int64_t> shape, Rng& rng, T lo = T(-1), T hi = T(1)) {
        Tensor t = zeros(std::move(shape));
        std::uniform_real_distribution<double> dist{double(lo), double(hi)};
        for (auto& x : t.node_->value) x = T(dist(rng));
        return t;
    }

    // Normal(0, stddev) with samples beyond 2*stddev redrawn.
    static Tensor trunc_normal(std::vector<int64_t> shape, Rng& rng, T stddev) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> dist(0.0, double(stddev));
        for (auto& x : t.node_->value) {
            double v = dist(rng);
            while (std::abs(v) > 2.0 * double(stddev)) v = dist(rng);
            x = T(v);
        }
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int64_t>& shape() const { return node_->shape; }
    int64_t dim() const { return (int64_t)node_->shape.size(); }
    int64_t size(int64_t axis) const {
        if (axis < 0) axis += dim();
        return node_->shape[axis];
    }
    int64_t numel() const { return node_->numel(); }

    std::span<const T> data() const { return node_->value; }
    // Direct mutation; for leaves only (params, test fixtures).
    std::span<T> raw_data() { return node_->value; }

    T item() const {
        check(numel() == 1, "item(): tensor has ", numel(), " elements");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        if (on) node_->ensure_grad();
        return *this;
    }

    std::span<const T> grad() const { return node_->grad; }
    std::span<T> raw_grad() { return node_->grad; }
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    bool all_finite() const {
        for (T v : node_->value)
            if (!std::isfinite((double)v)) return false;
        return true;
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

    // Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    // calls; interior gradients are scratch per sweep.
    void backward() const {
        check(numel() == 1, "backward(): loss must be scalar, got ", shape_str(shape()));
        std::vector<TensorNode<T>*> order;
        std::unordered_set<TensorNode<T>*> seen;
        topo_visit(node_.get(), seen, order);
        for (TensorNode<T>* n : order)
            if (n->backprop) std::fill(n->grad.begin(), n->grad.end(), T(0));
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backprop) (*it)->backprop();
    }

private:
    static void topo_visit(TensorNode<T>* n, std::unordered_set<TensorNode<T>*>& seen,
                           std::vector<TensorNode<T>*>& order) {
        if (!n->requires_grad || seen.count(n)) return;
        // iterative DFS; graphs can be deep (many blocks x many ops)
        struct Frame {
            TensorNode<T>* node;
            size_t next_parent;
        };
        std::vector<Frame> stack{{n, 0}};
        seen.insert(n);
        n->ensure_grad();
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                TensorNode<T>* p = f.node->parents[f.next_parent++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    p->ensure_grad();
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    loss.backward();
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
bool want_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// Marks `out` as produced from `parents` with backward body `fn`. `fn` may
// capture raw node pointers for out and parents: parents are retained by
// out's node, and the closure's lifetime equals out's.
template <typename T>
void attach(Tensor<T>& out, std::initializer_list<Tensor<T>> parents, std::function<void()> fn) {
    auto n = out.node();
    n->requires_grad = true;
    for (const Tensor<T>& p : parents)
        if (p.defined()) n->parents.push_back(p.node());
    n->backprop = std::move(fn);
}

}  // namespace detail

}  // namespace bmf
