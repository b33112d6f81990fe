#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rcc/common.hpp"
#include "rcc/rng.hpp"

namespace rcc {

template <class T>
struct TensorNode;

// Leaf-gradient sink. When supplied to backward(), gradients of leaf nodes
// (parameters) are accumulated here instead of in the nodes themselves, so
// several graphs over shared parameters can be differentiated concurrently
// and merged in a deterministic order afterwards.
template <class T>
struct LeafGrads {
    std::unordered_map<const TensorNode<T>*, std::vector<T>> grads;

    std::vector<T>& at(const TensorNode<T>* n, std::size_t size) {
        auto& g = grads[n];
        if (g.empty()) g.assign(size, T(0));
        return g;
    }
};

template <class T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;

    // Reverse-mode graph. backward_fn reads this->grad and accumulates into
    // the parents. Cleared after backward() to release activations.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&, LeafGrads<T>*)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::vector<T>& grad_buffer(LeafGrads<T>* sink) {
        if (sink && is_leaf()) return sink->at(this, value.size());
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

// Thread-local autograd switch. Forward passes executed under NoGradGuard
// build no graph and retain no intermediate state.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

// Dense tensor handle. Value semantics on the handle, shared storage under it.
// Values are immutable once an op has consumed them; only grad accumulates.
template <class T>
class Tensor {
 public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                            bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw ShapeError("data length does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    // 2-D conveniences; a 1-D tensor is treated as a single row.
    int rows() const { return ndim() == 2 ? dim(0) : 1; }
    int cols() const { return ndim() == 2 ? dim(1) : static_cast<int>(numel()); }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<T>& grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }
    void drop_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
        return node_->value[0];
    }

    // Reverse-mode differentiation from a scalar. Frees the graph as it goes.
    // With a sink, leaf gradients land in the sink instead of the leaves.
    void backward(LeafGrads<T>* sink = nullptr) const {
        if (numel() != 1) throw ShapeError("backward() requires a scalar root");
        if (!node_->requires_grad)
            throw ParamError("backward() on a tensor that does not require grad");

        // Iterative post-order topological sort over the requires-grad slice.
        // The order owns the nodes so the graph can be released as we go.
        std::vector<std::shared_ptr<TensorNode<T>>> order;
        std::unordered_map<TensorNode<T>*, int> state;  // 0 new, 1 open, 2 done
        std::vector<std::shared_ptr<TensorNode<T>>> stack{node_};
        while (!stack.empty()) {
            std::shared_ptr<TensorNode<T>> n = stack.back();
            int& st = state[n.get()];
            if (st == 0) {
                st = 1;
                for (auto& p : n->parents)
                    if (p->requires_grad && state[p.get()] == 0) stack.push_back(p);
            } else {
                stack.pop_back();
                if (st == 1) {
                    st = 2;
                    order.push_back(std::move(n));
                }
            }
        }

        node_->grad_buffer(sink).assign(1, T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<T>* n = it->get();
            if (n->backward_fn) {
                n->backward_fn(*n, sink);
                // Release the graph edge-by-edge; activations captured by the
                // lambdas die with them.
                n->backward_fn = nullptr;
                n->parents.clear();
                if (n != node_.get()) {
                    n->grad.clear();
                    n->grad.shrink_to_fit();
                }
            }
        }
    }

    std::shared_ptr<TensorNode<T>>& ptr() { return node_; }
    const std::shared_ptr<TensorNode<T>>& ptr() const { return node_; }
    TensorNode<T>* node() const { return node_.get(); }

    void fill_normal(Rng& rng, T stddev) {
        for (auto& v : node_->value) v = static_cast<T>(rng.gauss()) * stddev;
    }
    void fill(T v) { std::fill(node_->value.begin(), node_->value.end(), v); }

 private:
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode<T>> node_;
};

// Named, possibly frozen model parameter. trainable == false also disables
// gradient flow, so frozen subgraphs retain no differentiation state.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;

    void set_trainable(bool b) {
        trainable = b;
        tensor.set_requires_grad(b);
    }
};

}  // namespace rcc
