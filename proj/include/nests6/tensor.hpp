#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nests6/error.hpp"
#include "nests6/rng.hpp"

namespace nests6 {

// Dense row-major N-d array. Storage is shared between copies; the project
// convention is that an op fills a freshly created tensor and nobody mutates
// it afterwards (parameters updated in place by the optimizer are the one
// sanctioned exception, and they are never aliased by live tape nodes).
//
// tape_gen/tape_id tie a tensor to a node on one specific Tape instance.
// Generations make stale ids from an earlier pass harmless.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<T>> buf;
    bool requires_grad = false;
    uint64_t tape_gen = 0;
    int tape_id = -1;

    Tensor() : buf(std::make_shared<std::vector<T>>()) {}

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        buf = std::make_shared<std::vector<T>>(static_cast<size_t>(count(shape)), T(0));
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) {
            if (e < 0) throw ShapeError("negative extent in shape");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        for (auto& x : *t.buf) x = v;
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from(std::vector<int> s, std::vector<T> values) {
        Tensor t;
        t.shape = std::move(s);
        if (count(t.shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("value count does not match shape");
        t.buf = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& x : *t.buf) x = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(buf->size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    const T* ptr() const { return buf->data(); }
    T* ptr() { return buf->data(); }
    std::span<const T> view() const { return {buf->data(), buf->size()}; }

    T& operator[](int64_t i) { return (*buf)[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return (*buf)[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // deep copy with detached tape metadata
    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.buf = std::make_shared<std::vector<T>>(*buf);
        return t;
    }

    // same buffer, no tape linkage
    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.buf = buf;
        return t;
    }

    bool finite() const {
        for (const T& v : *buf)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.buf = std::make_shared<std::vector<U>>(buf->size());
        for (size_t i = 0; i < buf->size(); ++i) (*t.buf)[i] = static_cast<U>((*buf)[i]);
        return t;
    }
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// Reverse-mode tape. Nodes are recorded in forward order, so node ids are a
// topological order and the backward sweep visits each node exactly once, in
// a fixed order -- gradients are bit-reproducible across runs.
template <typename T>
class Tape {
public:
    Tape() : gen_(next_gen_.fetch_add(1) + 1) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    uint64_t gen() const { return gen_; }
    size_t size() const { return nodes_.size(); }

    bool owns(const Tensor<T>& t) const { return t.tape_id >= 0 && t.tape_gen == gen_; }

    // Register a leaf (parameter). Idempotent for tensors already on this tape.
    int watch(Tensor<T>& t) {
        if (owns(t)) return t.tape_id;
        t.requires_grad = true;
        t.tape_gen = gen_;
        t.tape_id = add_node(t.numel(), {}, nullptr);
        return t.tape_id;
    }

    // Record an op that produced `out` from `parents`. The backward closure
    // reads this node's gradient buffer and accumulates into its parents'.
    // Captured input tensors inside the closure are the saved activations.
    void record(Tensor<T>& out, std::vector<int> parents,
                std::function<void(Tape&, int)> backward) {
        out.tape_gen = gen_;
        out.tape_id = add_node(out.numel(), std::move(parents), std::move(backward));
        out.requires_grad = true;
    }

    std::span<T> grad_buf(int id) {
        auto& g = grads_[static_cast<size_t>(id)];
        if (g.empty()) g.assign(static_cast<size_t>(numel_[static_cast<size_t>(id)]), T(0));
        touched_[static_cast<size_t>(id)] = 1;
        return {g.data(), g.size()};
    }

    bool touched(int id) const { return touched_[static_cast<size_t>(id)] != 0; }

    // Backward from a scalar loss recorded on this tape.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + loss.shape_str());
        if (!owns(loss)) throw ShapeError("backward: loss is not on this tape");
        grad_buf(loss.tape_id)[0] = T(1);
        for (int id = loss.tape_id; id >= 0; --id) {
            size_t i = static_cast<size_t>(id);
            if (!touched_[i] || !nodes_[i]) continue;
            nodes_[i](*this, id);
        }
    }

    // Gradient of a watched/recorded tensor; zeros if it never received one.
    Tensor<T> grad(const Tensor<T>& t) const {
        Tensor<T> g(t.shape);
        if (owns(t) && touched_[static_cast<size_t>(t.tape_id)]) {
            const auto& src = grads_[static_cast<size_t>(t.tape_id)];
            std::copy(src.begin(), src.end(), g.buf->begin());
        }
        return g;
    }

private:
    int add_node(int64_t numel, std::vector<int> parents, std::function<void(Tape&, int)> backward) {
        nodes_.push_back(std::move(backward));
        parents_.push_back(std::move(parents));
        numel_.push_back(numel);
        grads_.emplace_back();
        touched_.push_back(0);
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<std::function<void(Tape&, int)>> nodes_;
    std::vector<std::vector<int>> parents_;
    std::vector<int64_t> numel_;
    std::vector<std::vector<T>> grads_;
    std::vector<char> touched_;
    uint64_t gen_;

    static inline std::atomic<uint64_t> next_gen_{0};
};

// Runs the backward sweep; gradients are then queried per tensor via
// tape.grad(t). Unreachable parameters report zero gradients.
template <typename T>
inline void backprop(Tape<T>& tape, const Tensor<T>& loss) {
    tape.backward(loss);
}

// Bias-corrected adaptive-moment optimizer state for one parameter tensor.
template <typename T>
struct AdamState {
    Tensor<T> first_moment;
    Tensor<T> second_moment;
    int64_t step_count = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState make(const Tensor<T>& param, double lr) {
        AdamState s;
        s.first_moment = Tensor<T>(param.shape);
        s.second_moment = Tensor<T>(param.shape);
        s.lr = lr;
        return s;
    }
};

// In-place update. A non-finite gradient skips the update and reports false.
template <typename T>
inline bool adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state) {
    check_same_shape(param, grad, "adam_update");
    check_same_shape(param, state.first_moment, "adam_update/state");
    if (!grad.finite()) return false;
    state.step_count += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    T* p = param.ptr();
    const T* g = grad.ptr();
    T* m = state.first_moment.ptr();
    T* v = state.second_moment.ptr();
    const int64_t n = param.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / c1;
        const double vhat = vi / c2;
        p[i] = static_cast<T>(static_cast<double>(p[i]) - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
    return true;
}

}  // namespace nests6
