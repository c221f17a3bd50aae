// Dense row-major tensor with reverse-mode automatic differentiation.
//
// The design is define-by-run: a Tape is created per forward pass, ops that
// see a tracked input append a node with a backward closure, and
// Tape::backward walks the nodes once in reverse creation order. Tapes are
// single-use; parameters (Param) persist across steps and receive their
// gradients through leaf nodes bound with Tape::leaf.
//
// Tensor buffers are shared_ptr-held so closures can capture operands
// without copying. Tensors are treated as immutable once another op has
// consumed them.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mtdnn/common.hpp"
#include "mtdnn/rng.hpp"

namespace mtdnn {

enum class Mode { Train, Eval };

template <typename T>
class Tape;

template <typename T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> buf;
    Tape<T>* tape = nullptr;
    int node = -1;

    Tensor() = default;

    static Tensor zeros(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.buf = std::make_shared<std::vector<T>>(size_t(numel(t.shape)), T(0));
        return t;
    }

    static Tensor uninit(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.buf = std::make_shared<std::vector<T>>(size_t(numel(t.shape)));
        return t;
    }

    static Tensor from(Shape s, std::vector<T> values) {
        MTDNN_CHECK(numel(s) == int64_t(values.size()), ShapeError,
                    "tensor init: shape " << shape_str(s) << " wants " << numel(s)
                                          << " values, got " << values.size());
        Tensor t;
        t.shape = std::move(s);
        t.buf = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    bool defined() const { return buf != nullptr; }
    bool tracked() const { return tape != nullptr && node >= 0; }
    bool requires_grad() const { return tracked(); }

    int64_t size() const { return int64_t(buf ? buf->size() : 0); }
    int ndim() const { return int(shape.size()); }
    int dim(int i) const { return shape[size_t(i)]; }
    int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 0 : 1); }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 0 : shape[0]); }

    const T* ptr() const { return buf->data(); }
    T* ptr() { return buf->data(); }
    const std::vector<T>& vec() const { return *buf; }
    std::vector<T>& vec() { return *buf; }

    T item() const {
        MTDNN_CHECK(size() == 1, ContractError,
                    "item(): tensor has " << size() << " elements, expected 1");
        return (*buf)[0];
    }

    // Value copy with no tape participation.
    Tensor detach() const {
        Tensor t;
        t.shape = shape;
        t.buf = buf;
        return t;
    }
};

// A persistent trainable tensor. Gradients accumulate into `grad` when a
// tape it was bound to runs backward.
template <typename T>
struct Param {
    std::string name;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;

    Param() = default;
    Param(std::string n, Shape s)
        : name(std::move(n)),
          shape(std::move(s)),
          value(size_t(numel(shape)), T(0)),
          grad(size_t(numel(shape)), T(0)) {}

    int64_t size() const { return int64_t(value.size()); }

    void fill_normal(Rng& rng, double sigma) {
        for (auto& v : value) v = T(rng.normal(0.0, sigma));
    }
    void fill(T v) {
        for (auto& x : value) x = v;
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Per-thread watch used by the gradient checker: while active, relu logs its
// inputs into `sink` (so the checker can detect kink crossings between the
// two finite-difference evaluations) and dropout refuses to run.
struct GradCheckWatch {
    static bool& active() {
        thread_local bool v = false;
        return v;
    }
    static std::vector<double>*& sink() {
        thread_local std::vector<double>* v = nullptr;
        return v;
    }
};

template <typename T>
class Tape {
  public:
    // Backward closure: receives the tape and this node's output gradient.
    using BackFn = std::function<void(Tape&, const std::vector<T>&)>;

    struct Node {
        int64_t n = 0;  // numel of this node's output
        std::vector<T> grad;
        BackFn back;
        Param<T>* leaf = nullptr;
    };

    // Binds a parameter as a tracked leaf. Backward adds into p.grad.
    Tensor<T> leaf(Param<T>& p) {
        Tensor<T> t;
        t.shape = p.shape;
        t.buf = std::make_shared<std::vector<T>>(p.value);
        t.tape = this;
        t.node = push(p.size(), BackFn{});
        nodes_[size_t(t.node)].leaf = &p;
        return t;
    }

    int push(int64_t out_numel, BackFn back) {
        nodes_.push_back(Node{out_numel, {}, std::move(back), nullptr});
        return int(nodes_.size()) - 1;
    }

    // Gradient buffer of a node, allocated (zeroed) on first touch.
    std::vector<T>& grad(int node) {
        Node& nd = nodes_[size_t(node)];
        if (nd.grad.empty()) nd.grad.assign(size_t(nd.n), T(0));
        return nd.grad;
    }

    bool has_grad(int node) const { return !nodes_[size_t(node)].grad.empty(); }

    void add_grad(int node, const T* src, int64_t n) {
        auto& g = grad(node);
        MTDNN_CHECK(int64_t(g.size()) == n, ShapeError,
                    "gradient size mismatch: node holds " << g.size() << ", got " << n);
        for (int64_t i = 0; i < n; ++i) g[size_t(i)] += src[size_t(i)];
    }

    void backward(const Tensor<T>& loss) {
        MTDNN_CHECK(!used_, ContractError,
                    "backward called twice on the same tape; rebuild the graph first");
        MTDNN_CHECK(loss.tape == this && loss.node >= 0, ContractError,
                    "backward: loss tensor is not on this tape");
        MTDNN_CHECK(loss.size() == 1, ContractError,
                    "backward: loss must be scalar, got shape " << shape_str(loss.shape));
        used_ = true;
        grad(loss.node).front() = T(1);
        for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
            Node& nd = nodes_[size_t(i)];
            if (nd.grad.empty()) continue;  // not on a path to the loss
            if (nd.back) nd.back(*this, nd.grad);
        }
        for (Node& nd : nodes_) {
            if (nd.leaf && !nd.grad.empty()) {
                for (size_t i = 0; i < nd.grad.size(); ++i) nd.leaf->grad[i] += nd.grad[i];
            }
        }
    }

    bool used() const { return used_; }
    size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    bool used_ = false;
};

// Tape that the output of an op joins: the unique tape among tracked inputs.
template <typename T>
Tape<T>* joint_tape(std::initializer_list<const Tensor<T>*> ins) {
    Tape<T>* tp = nullptr;
    for (const Tensor<T>* t : ins) {
        if (!t->tracked()) continue;
        MTDNN_CHECK(tp == nullptr || tp == t->tape, ContractError,
                    "operands live on different tapes");
        tp = t->tape;
    }
    return tp;
}

}  // namespace mtdnn
