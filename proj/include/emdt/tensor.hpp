#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "emdt/common.hpp"
#include "emdt/random.hpp"

namespace emdt {

template <std::floating_point S>
class Tensor;

namespace autograd {

inline thread_local bool grad_enabled = true;

/// RAII guard disabling graph construction on the current thread.
struct NoGradGuard {
    NoGradGuard() : prev(grad_enabled) { grad_enabled = false; }
    ~NoGradGuard() { grad_enabled = prev; }
    bool prev;
};

/// One record of the compute graph: the primitive that produced an output,
/// the inputs it consumed, and a closure holding whatever activations the
/// backward rule needs. Reverse-mode traversal visits each node exactly once
/// in reverse topological order.
template <std::floating_point S>
struct Node {
    std::string op;
    std::vector<Tensor<S>> parents;
    std::function<void(const Tensor<S>&)> backward;
};

/// Multiply-accumulate counter for the current thread. Ops add their MAC
/// volume before dispatching work, so worker threads never touch it.
inline thread_local int64_t mac_counter = 0;

struct MacCounterScope {
    MacCounterScope() : saved(mac_counter) { mac_counter = 0; }
    int64_t count() const { return mac_counter; }
    ~MacCounterScope() { mac_counter = saved; }
    int64_t saved;
};

}  // namespace autograd

/// Dense row-major tensor. A Tensor is a cheap handle: copies share one
/// storage record holding the data and the (lazily allocated) gradient, so
/// a gradient accumulated through any handle is visible through all of
/// them. Buffers are treated as immutable after an op produces them; the
/// optimizer's in-place parameter update is the one sanctioned exception.
template <std::floating_point S>
class Tensor {
    struct Storage {
        std::vector<S> data;
        std::vector<S> grad;  // empty until a gradient is demanded
    };

public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<S> values, bool requires_grad = false)
        : shape_(std::move(shape)),
          storage_(std::make_shared<Storage>(Storage{std::move(values), {}})),
          requires_grad_(requires_grad) {
        if (numel_of(shape_) != static_cast<int64_t>(storage_->data.size()))
            throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match buffer size " +
                             std::to_string(storage_->data.size()));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const int64_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<S>(static_cast<size_t>(n), S(0)), requires_grad);
    }

    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        const int64_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<S>(static_cast<size_t>(n), value), requires_grad);
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, S stddev = S(1), bool requires_grad = false) {
        const int64_t n = numel_of(shape);
        std::vector<S> v(static_cast<size_t>(n));
        for (auto& x : v) x = static_cast<S>(rng.normal()) * stddev;
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return storage_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i < 0 ? ndim() + i : i)]; }
    int64_t numel() const { return storage_ ? static_cast<int64_t>(storage_->data.size()) : 0; }

    std::vector<S>& data() { return storage_->data; }
    const std::vector<S>& data() const { return storage_->data; }
    S* ptr() { return storage_->data.data(); }
    const S* ptr() const { return storage_->data.data(); }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
        return storage_->data[0];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    bool has_grad() const { return storage_ && !storage_->grad.empty(); }
    std::vector<S>& grad() {
        ensure_grad();
        return storage_->grad;
    }
    const std::vector<S>& grad() const {
        if (!has_grad()) throw ShapeError("grad: no gradient present");
        return storage_->grad;
    }
    void ensure_grad() const {
        if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), S(0));
    }
    void zero_grad() {
        if (has_grad()) std::fill(storage_->grad.begin(), storage_->grad.end(), S(0));
    }
    void drop_grad() {
        if (storage_) storage_->grad.clear();
    }

    /// Detached handle onto the same storage: no graph edge, no gradient demand.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.storage_ = storage_;
        return t;
    }

    Tensor clone() const { return Tensor(shape_, storage_->data, requires_grad_); }

    bool same_buffer(const Tensor& other) const { return storage_ == other.storage_; }

    std::shared_ptr<autograd::Node<S>> node;

private:
    Shape shape_;
    std::shared_ptr<Storage> storage_;
    bool requires_grad_ = false;
};

namespace detail {

template <std::floating_point S>
void accumulate(Tensor<S>& t, const std::vector<S>& delta) {
    t.ensure_grad();
    auto& g = t.grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

/// Attaches a graph node to out when gradients are demanded.
template <std::floating_point S>
void attach_node(Tensor<S>& out, std::string op, std::vector<Tensor<S>> parents,
                 std::function<void(const Tensor<S>&)> backward) {
    if (!autograd::grad_enabled) return;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return;
    out.set_requires_grad(true);
    out.node = std::make_shared<autograd::Node<S>>(
        autograd::Node<S>{std::move(op), std::move(parents), std::move(backward)});
}

template <std::floating_point S>
void ensure_finite(const Tensor<S>& t, const char* op) {
    // Summing |v| and checking the total catches any NaN/Inf in one
    // vectorizable pass; the exact scan only reruns on failure.
    const auto& v = t.data();
    constexpr size_t kChunk = 1 << 14;
    for (size_t base = 0; base < v.size(); base += kChunk) {
        const size_t end = std::min(v.size(), base + kChunk);
        S acc = 0;
        for (size_t i = base; i < end; ++i) acc += std::abs(v[i]);
        if (!std::isfinite(acc)) {
            // either a non-finite element, or the chunk sum overflowed on
            // large finite values; only the former is an error
            for (size_t i = base; i < end; ++i)
                if (!std::isfinite(v[i])) throw NumericsError(std::string(op) + ": non-finite value produced");
        }
    }
}

/// Reverse-mode differentiation from a scalar loss. Builds the reverse
/// topological order of the reachable graph iteratively, seeds d(loss)=1,
/// and runs every node's backward rule exactly once.
template <std::floating_point S>
void backward(Tensor<S>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ShapeError("backward: loss does not require grad");

    std::vector<Tensor<S>> order;
    std::unordered_set<const autograd::Node<S>*> visited;
    struct Frame {
        Tensor<S> t;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    if (loss.node) {
        visited.insert(loss.node.get());
        stack.push_back({loss, 0});
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        auto& parents = f.t.node->parents;
        bool descended = false;
        while (f.next_parent < parents.size()) {
            Tensor<S>& p = parents[f.next_parent++];
            if (p.node && !visited.count(p.node.get())) {
                visited.insert(p.node.get());
                stack.push_back({p, 0});
                descended = true;
                break;
            }
        }
        if (!descended && f.next_parent >= stack.back().t.node->parents.size()) {
            order.push_back(stack.back().t);
            stack.pop_back();
        }
    }

    loss.ensure_grad();
    loss.grad()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        it->node->backward(*it);
    }
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
    std::vector<To> v(t.data().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(t.data()[i]);
    return Tensor<To>(t.shape(), std::move(v));
}

}  // namespace emdt
