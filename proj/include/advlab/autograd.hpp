#pragma once

#include <atomic>
#include <functional>
#include <vector>

#include "advlab/tensor.hpp"

namespace advlab {

// Reverse-mode tape. One tape per thread of execution: constructing a
// GradTape makes it the active tape for the current thread, destroying it
// restores the previous one. Operations check the active tape and append a
// node when any input is tracked; replaying the nodes in reverse order
// accumulates exactly one gradient per tracked leaf.
template <typename T>
class GradTape {
public:
    GradTape() : id_(next_id()) {
        prev_ = current();
        current() = this;
    }
    ~GradTape() { current() = prev_; }

    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    // Active tape for this thread, or nullptr when none exists or recording
    // is suppressed by a NoGradGuard.
    static GradTape* active() { return suppress_depth() > 0 ? nullptr : current(); }

    static void push_suppress() { ++suppress_depth(); }
    static void pop_suppress() { --suppress_depth(); }

    // Registers a leaf. Gradients accumulate into leaves but no backward
    // function runs for them.
    int watch(const Tensor<T>& t) {
        auto* m = t.grad_meta();
        if (m->tape_id == id_) return m->node;
        m->tape_id = id_;
        m->node = add_node(t.shape());
        return m->node;
    }

    // Node of `t` on this tape; tracks requires_grad leaves on first use.
    // Returns -1 for constants.
    int node_of(const Tensor<T>& t) {
        if (t.has_meta()) {
            auto* m = t.grad_meta();
            if (m->tape_id == id_) return m->node;
        }
        if (t.requires_grad) return watch(t);
        return -1;
    }

    // Registers an operation output; the backward closure (which needs the
    // returned node id) is attached afterwards with set_backward.
    int make_node(Tensor<T>& out) {
        int node = add_node(out.shape());
        auto* m = out.grad_meta();
        m->tape_id = id_;
        m->node = node;
        return node;
    }

    void set_backward(int node, std::function<void(GradTape&)> backward) {
        nodes_[static_cast<size_t>(node)].backward = std::move(backward);
    }

    // Incoming gradient of a node; empty vector means no gradient reached it.
    const std::vector<T>& grad_buf(int node) const { return grads_[static_cast<size_t>(node)]; }

    void accumulate(int node, const T* g, int64_t n) {
        auto& buf = grads_[static_cast<size_t>(node)];
        if (buf.empty()) buf.assign(static_cast<size_t>(n), T(0));
        for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] += g[i];
    }

    // Convenience for backward lambdas that build the gradient in place:
    // returns a zeroed buffer of the node's size on first touch.
    std::vector<T>& grad_acc(int node) {
        auto& buf = grads_[static_cast<size_t>(node)];
        if (buf.empty()) buf.assign(static_cast<size_t>(numel(node)), T(0));
        return buf;
    }

    int64_t numel(int node) const {
        int64_t n = 1;
        for (int e : nodes_[static_cast<size_t>(node)].shape) n *= e;
        return n;
    }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss");
        if (!loss.has_meta() || loss.grad_meta()->tape_id != id_)
            throw Error("backward: loss was not recorded on this tape");
        int root = loss.grad_meta()->node;
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<size_t>(root)] = {T(1)};
        for (int i = root; i >= 0; --i) {
            auto& node = nodes_[static_cast<size_t>(i)];
            if (node.backward && !grads_[static_cast<size_t>(i)].empty()) node.backward(*this);
        }
    }

    bool has_grad(const Tensor<T>& t) const {
        if (!t.has_meta()) return false;
        auto* m = t.grad_meta();
        return m->tape_id == id_ && m->node >= 0 &&
               m->node < static_cast<int>(grads_.size()) &&
               !grads_[static_cast<size_t>(m->node)].empty();
    }

    // Gradient of the last backward() with respect to `t`. Zero tensor if no
    // gradient path reached it.
    Tensor<T> grad(const Tensor<T>& t) const {
        if (!t.has_meta() || t.grad_meta()->tape_id != id_)
            throw Error("grad: tensor is not tracked on this tape");
        int node = t.grad_meta()->node;
        const auto& buf = grads_[static_cast<size_t>(node)];
        if (buf.empty()) return Tensor<T>::zeros_like(t);
        return Tensor<T>(t.shape(), buf);
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<int> shape;
        std::function<void(GradTape&)> backward;  // empty for leaves
    };

    int add_node(const std::vector<int>& shape) {
        nodes_.push_back(Node{shape, {}});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    static GradTape*& current() {
        thread_local GradTape* tape = nullptr;
        return tape;
    }
    static int& suppress_depth() {
        thread_local int depth = 0;
        return depth;
    }
    static uint64_t next_id() {
        static std::atomic<uint64_t> counter{0};
        return ++counter;
    }

    uint64_t id_;
    GradTape* prev_ = nullptr;
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
};

// Disables tape recording for the current thread while alive. Used for the
// frozen pretrained path and for evaluation.
struct NoGradGuard {
    NoGradGuard() {
        GradTape<float>::push_suppress();
        GradTape<double>::push_suppress();
    }
    ~NoGradGuard() {
        GradTape<float>::pop_suppress();
        GradTape<double>::pop_suppress();
    }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace advlab
