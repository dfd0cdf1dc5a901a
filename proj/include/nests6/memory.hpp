#pragma once

#include <cmath>
#include <string>

#include "nests6/ops.hpp"
#include "nests6/tensor.hpp"

namespace nests6 {

enum class MemoryMode { teacher_forced, free_running };

// Persistent spatial memory for one evaluation/training stream. The tensor m
// lives off-tape; writes build a tape-linked update whose detached value the
// stream commits afterwards. In free-running mode m may change only through
// decay, which the instrumentation counters make checkable.
template <typename T>
struct MemoryState {
    Tensor<T> m;  // [B, D, H, W]
    MemoryMode mode = MemoryMode::teacher_forced;
    int64_t write_count = 0;
    int64_t decay_count = 0;

    static MemoryState zeros(int B, int D, int H, int W) {
        MemoryState s;
        s.m = Tensor<T>({B, D, H, W});
        return s;
    }
};

// Per-pixel magnitude of the previous one-step prediction error, in
// normalized units, gradient-detached.
template <typename T>
struct Surprise {
    Tensor<T> s;  // [B, 1, H, W]
};

// Slow-learner parameters: a two-layer 1x1 conv write network phi over
// concat(z, s), the injection gate conv, and the scalar decay logit.
template <typename T>
struct DeepOptimizer2D {
    Tensor<T> phi1_w, phi1_b;  // [D, D+1, 1, 1], [D]
    Tensor<T> phi2_w, phi2_b;  // [D, D, 1, 1], [D]
    Tensor<T> gate_w, gate_b;  // [D, D, 1, 1], [D]
    Tensor<T> lambda_logit;    // [1]

    double lambda_value() const {
        const double x = static_cast<double>(lambda_logit[0]);
        return 1.0 / (1.0 + std::exp(-x));
    }
};

template <typename T>
Surprise<T> compute_surprise(const Tensor<T>& y_hat_prev, const Tensor<T>& y_prev) {
    check_same_shape(y_hat_prev, y_prev, "compute_surprise");
    Tensor<T> s;
    if (y_hat_prev.rank() == 2)
        s = Tensor<T>({1, 1, y_hat_prev.dim(0), y_hat_prev.dim(1)});
    else if (y_hat_prev.rank() == 4 && y_hat_prev.dim(1) == 1)
        s = Tensor<T>(y_hat_prev.shape);
    else
        throw ShapeError("compute_surprise: want [H,W] or [B,1,H,W], got " + y_hat_prev.shape_str());
    const T* a = y_hat_prev.ptr();
    const T* b = y_prev.ptr();
    T* ps = s.ptr();
    const int64_t n = y_hat_prev.numel();
    for (int64_t i = 0; i < n; ++i) ps[i] = std::abs(a[i] - b[i]);
    return Surprise<T>{std::move(s)};
}

// M_t = lambda * M_{t-1} + (1 - lambda) * tanh(phi(z, s)). Returns the
// tape-linked update; the caller commits its detached value to the stream
// state. Rejected in free-running mode.
template <typename T>
Tensor<T> memory_write(Tape<T>* tp, MemoryState<T>& mem, const Tensor<T>& z,
                       const Tensor<T>& surprise, const DeepOptimizer2D<T>& opt) {
    if (mem.mode != MemoryMode::teacher_forced)
        throw ConfigError("memory_write: writes are rejected in free-running mode");
    if (z.rank() != 4) throw ShapeError("memory_write: z must be [B,D,H,W]");
    Tensor<T> s = surprise;
    if (s.rank() != 4 || s.dim(0) != z.dim(0) || s.dim(1) != 1)
        throw ShapeError("memory_write: surprise must be [B,1,H,W], got " + s.shape_str());
    mem.write_count += 1;
    auto hidden = ops::silu(tp, ops::conv2d(tp, ops::concat_channels(tp, z, s), opt.phi1_w,
                                            &opt.phi1_b, 1, 0));
    auto phi = ops::tanh_(tp, ops::conv2d(tp, hidden, opt.phi2_w, &opt.phi2_b, 1, 0));
    auto lambda = ops::sigmoid(tp, opt.lambda_logit);
    auto keep = ops::mul_scalar_tensor(tp, mem.m.detached(), lambda);
    auto write = ops::mul_scalar_tensor(tp, phi, ops::affine(tp, lambda, -1.0, 1.0));
    return ops::add(tp, keep, write);
}

// Free-running evolution: M <- lambda * M. No writes occur on this path.
template <typename T>
void memory_decay(MemoryState<T>& mem, const DeepOptimizer2D<T>& opt) {
    if (mem.mode != MemoryMode::free_running)
        throw ConfigError("memory_decay: only defined for free-running mode");
    const T lambda = static_cast<T>(opt.lambda_value());
    for (auto& v : *mem.m.buf) v *= lambda;
    mem.decay_count += 1;
}

// z + sigmoid(gate(z)) ⊙ M, with M tiled across the leading step dimension
// of z when reps > 1.
template <typename T>
Tensor<T> memory_inject(Tape<T>* tp, const Tensor<T>& z, const Tensor<T>& m,
                        const DeepOptimizer2D<T>& opt, int reps = 1) {
    if (z.dim(0) != m.dim(0) * reps)
        throw ShapeError("memory_inject: z " + z.shape_str() + " vs memory " + m.shape_str() +
                         " with reps " + std::to_string(reps));
    auto gate = ops::sigmoid(tp, ops::conv2d(tp, z, opt.gate_w, &opt.gate_b, 1, 0));
    auto m_rep = reps == 1 ? m : ops::tile_batch0(tp, m, reps);
    return ops::add(tp, z, ops::mul(tp, gate, m_rep));
}

}  // namespace nests6
