#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "nests6/tensor.hpp"

// Forward ops with recorded reverse-mode closures. Every op takes the tape as
// its first argument; a null tape (or inputs that are not on the tape) means
// pure evaluation with nothing recorded. Saved activations are the input
// tensors captured by value inside the backward closures -- copies share the
// underlying buffers, so saving is cheap.
namespace nests6::ops {

template <typename T>
inline int pid(Tape<T>* tp, const Tensor<T>& t) {
    return (tp && tp->owns(t)) ? t.tape_id : -1;
}

template <typename T>
inline void axpy_into(std::span<T> dst, const T* src, int64_t n, T scale = T(1)) {
    for (int64_t i = 0; i < n; ++i) dst[static_cast<size_t>(i)] += scale * src[i];
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    const int ia = pid(tp, a), ib = pid(tp, b);
    if (ia >= 0 || ib >= 0) {
        tp->record(out, {std::max(ia, -1), std::max(ib, -1)}, [ia, ib, n](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            if (ia >= 0) axpy_into(t.grad_buf(ia), g.data(), n);
            if (ib >= 0) axpy_into(t.grad_buf(ib), g.data(), n);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    const int ia = pid(tp, a), ib = pid(tp, b);
    if (ia >= 0 || ib >= 0) {
        tp->record(out, {ia, ib}, [ia, ib, n](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            if (ia >= 0) axpy_into(t.grad_buf(ia), g.data(), n);
            if (ib >= 0) axpy_into(t.grad_buf(ib), g.data(), n, T(-1));
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    const int ia = pid(tp, a), ib = pid(tp, b);
    if (ia >= 0 || ib >= 0) {
        tp->record(out, {ia, ib}, [ia, ib, a, b, n](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            if (ia >= 0) {
                auto ga = t.grad_buf(ia);
                const T* pb2 = b.ptr();
                for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * pb2[i];
            }
            if (ib >= 0) {
                auto gb = t.grad_buf(ib);
                const T* pa2 = a.ptr();
                for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * pa2[i];
            }
        });
    }
    return out;
}

// alpha*x + beta with scalar constants
template <typename T>
Tensor<T> affine(Tape<T>* tp, const Tensor<T>& x, double alpha, double beta) {
    Tensor<T> out(x.shape);
    const T a = static_cast<T>(alpha), b = static_cast<T>(beta);
    const T* px = x.ptr();
    T* po = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = a * px[i] + b;
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, a, n](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            axpy_into(t.grad_buf(ix), g.data(), n, a);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> unary(Tape<T>* tp, const Tensor<T>& x, FwdFn fwd, BwdFn dfdx_from_x) {
    Tensor<T> out(x.shape);
    const T* px = x.ptr();
    T* po = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, x, dfdx_from_x, n](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            auto gx = t.grad_buf(ix);
            const T* px2 = x.ptr();
            for (int64_t i = 0; i < n; ++i)
                gx[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * dfdx_from_x(px2[i]);
        });
    }
    return out;
}

template <typename T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
inline T softplus_scalar(T x) {
    if (x > T(30)) return x;
    return std::log1p(std::exp(x));
}

}  // namespace detail

template <typename T>
Tensor<T> exp_(Tape<T>* tp, const Tensor<T>& x) {
    return detail::unary(
        tp, x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tp, const Tensor<T>& x) {
    return detail::unary(
        tp, x, [](T v) { return detail::sigmoid_scalar(v); },
        [](T v) {
            const T s = detail::sigmoid_scalar(v);
            return s * (T(1) - s);
        });
}

template <typename T>
Tensor<T> tanh_(Tape<T>* tp, const Tensor<T>& x) {
    return detail::unary(
        tp, x, [](T v) { return std::tanh(v); },
        [](T v) {
            const T th = std::tanh(v);
            return T(1) - th * th;
        });
}

template <typename T>
Tensor<T> softplus(Tape<T>* tp, const Tensor<T>& x) {
    return detail::unary(
        tp, x, [](T v) { return detail::softplus_scalar(v); },
        [](T v) { return detail::sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> silu(Tape<T>* tp, const Tensor<T>& x) {
    return detail::unary(
        tp, x, [](T v) { return v * detail::sigmoid_scalar(v); },
        [](T v) {
            const T s = detail::sigmoid_scalar(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

// ---------------------------------------------------------------------------
// reductions and scalar plumbing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Tape<T>* tp, const Tensor<T>& x) {
    Tensor<T> out({1});
    T acc = T(0);
    const T* px = x.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out[0] = acc;
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, n](Tape<T>& t, int self) {
            const T g = t.grad_buf(self)[0];
            auto gx = t.grad_buf(ix);
            for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean_all(Tape<T>* tp, const Tensor<T>& x) {
    return affine(tp, sum_all(tp, x), 1.0 / static_cast<double>(x.numel()), 0.0);
}

// x * s where s is a [1] tensor (typically a learned scalar on the tape)
template <typename T>
Tensor<T> mul_scalar_tensor(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeError("mul_scalar_tensor: scale must be [1], got " + s.shape_str());
    Tensor<T> out(x.shape);
    const T sv = s[0];
    const T* px = x.ptr();
    T* po = out.ptr();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sv;
    const int ix = pid(tp, x), is = pid(tp, s);
    if (ix >= 0 || is >= 0) {
        tp->record(out, {ix, is}, [ix, is, x, sv, n](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            if (ix >= 0) axpy_into(t.grad_buf(ix), g.data(), n, sv);
            if (is >= 0) {
                T acc = T(0);
                const T* px2 = x.ptr();
                for (int64_t i = 0; i < n; ++i) acc += g[static_cast<size_t>(i)] * px2[i];
                t.grad_buf(is)[0] += acc;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: incompatible " + a.shape_str() + " vs " + b.shape_str());
    const int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor<T> out({B, Ca + Cb, H, W});
    const int64_t hw = static_cast<int64_t>(H) * W;
    for (int bb = 0; bb < B; ++bb) {
        std::copy_n(a.ptr() + bb * Ca * hw, Ca * hw, out.ptr() + bb * (Ca + Cb) * hw);
        std::copy_n(b.ptr() + bb * Cb * hw, Cb * hw, out.ptr() + (bb * (Ca + Cb) + Ca) * hw);
    }
    const int ia = pid(tp, a), ib = pid(tp, b);
    if (ia >= 0 || ib >= 0) {
        tp->record(out, {ia, ib}, [ia, ib, B, Ca, Cb, hw](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            if (ia >= 0) {
                auto ga = t.grad_buf(ia);
                for (int bb = 0; bb < B; ++bb)
                    axpy_into(ga.subspan(static_cast<size_t>(bb * Ca * hw)),
                              g.data() + bb * (Ca + Cb) * hw, Ca * hw);
            }
            if (ib >= 0) {
                auto gb = t.grad_buf(ib);
                for (int bb = 0; bb < B; ++bb)
                    axpy_into(gb.subspan(static_cast<size_t>(bb * Cb * hw)),
                              g.data() + (bb * (Ca + Cb) + Ca) * hw, Cb * hw);
            }
        });
    }
    return out;
}

// [B,C,H,W] -> [B,C] average over positions
template <typename T>
Tensor<T> spatial_mean(Tape<T>* tp, const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("spatial_mean: want rank 4, got " + x.shape_str());
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<T> out({B, C});
    const T* px = x.ptr();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            T acc = T(0);
            const T* p = px + (b * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            out[b * C + c] = acc / static_cast<T>(hw);
        }
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, B, C, hw](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            auto gx = t.grad_buf(ix);
            const T inv = T(1) / static_cast<T>(hw);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const T gv = g[static_cast<size_t>(b * C + c)] * inv;
                    T* p = gx.data() + (b * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) p[i] += gv;
                }
        });
    }
    return out;
}

// [C] or [B,C] -> [B,C,H,W]; backward sums the broadcast dimensions
template <typename T>
Tensor<T> broadcast_spatial(Tape<T>* tp, const Tensor<T>& x, int B, int H, int W) {
    const bool per_batch = x.rank() == 2;
    if (!per_batch && x.rank() != 1)
        throw ShapeError("broadcast_spatial: want [C] or [B,C], got " + x.shape_str());
    const int C = per_batch ? x.dim(1) : x.dim(0);
    if (per_batch && x.dim(0) != B) throw ShapeError("broadcast_spatial: batch mismatch");
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<T> out({B, C, H, W});
    T* po = out.ptr();
    const T* px = x.ptr();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T v = per_batch ? px[b * C + c] : px[c];
            T* p = po + (b * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) p[i] = v;
        }
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, per_batch, B, C, hw](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            auto gx = t.grad_buf(ix);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    T acc = T(0);
                    const T* p = g.data() + (b * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) acc += p[i];
                    gx[static_cast<size_t>(per_batch ? b * C + c : c)] += acc;
                }
        });
    }
    return out;
}

// [B,C] + [C] row vector
template <typename T>
Tensor<T> add_rowvec(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& v) {
    if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
        throw ShapeError("add_rowvec: incompatible " + x.shape_str() + " vs " + v.shape_str());
    const int B = x.dim(0), C = x.dim(1);
    Tensor<T> out({B, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) out[b * C + c] = x[b * C + c] + v[c];
    const int ix = pid(tp, x), iv = pid(tp, v);
    if (ix >= 0 || iv >= 0) {
        tp->record(out, {ix, iv}, [ix, iv, B, C](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            if (ix >= 0) axpy_into(t.grad_buf(ix), g.data(), static_cast<int64_t>(B) * C);
            if (iv >= 0) {
                auto gv = t.grad_buf(iv);
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) gv[static_cast<size_t>(c)] += g[static_cast<size_t>(b * C + c)];
            }
        });
    }
    return out;
}

// repeat a [B,C,H,W] block `reps` times along the leading axis
template <typename T>
Tensor<T> tile_batch0(Tape<T>* tp, const Tensor<T>& x, int reps) {
    if (x.rank() != 4) throw ShapeError("tile_batch0: want rank 4, got " + x.shape_str());
    const int64_t n = x.numel();
    Tensor<T> out({x.dim(0) * reps, x.dim(1), x.dim(2), x.dim(3)});
    for (int r = 0; r < reps; ++r) std::copy_n(x.ptr(), n, out.ptr() + r * n);
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, reps, n](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            auto gx = t.grad_buf(ix);
            for (int r = 0; r < reps; ++r) axpy_into(gx, g.data() + r * n, n);
        });
    }
    return out;
}

// select step s from a [S*B,C,H,W] stack (step-major layout)
template <typename T>
Tensor<T> slice_step(Tape<T>* tp, const Tensor<T>& x, int steps, int s) {
    if (x.rank() != 4 || x.dim(0) % steps != 0)
        throw ShapeError("slice_step: leading dim not divisible by step count");
    if (s < 0 || s >= steps) throw ShapeError("slice_step: step index out of range");
    const int B = x.dim(0) / steps;
    const int64_t blk = static_cast<int64_t>(B) * x.dim(1) * x.dim(2) * x.dim(3);
    Tensor<T> out({B, x.dim(1), x.dim(2), x.dim(3)});
    std::copy_n(x.ptr() + s * blk, blk, out.ptr());
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, s, blk](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            axpy_into(t.grad_buf(ix).subspan(static_cast<size_t>(s * blk)), g.data(), blk);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// 2-d matmul with optional transposes; tiny operands only (pooled features)
template <typename T>
Tensor<T> matmul2d(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul2d: rank-2 operands required");
    const int m = ta ? a.dim(1) : a.dim(0);
    const int k = ta ? a.dim(0) : a.dim(1);
    const int kb = tb ? b.dim(1) : b.dim(0);
    const int n = tb ? b.dim(0) : b.dim(1);
    if (k != kb)
        throw ShapeError("matmul2d: inner dims disagree " + a.shape_str() + " vs " + b.shape_str());
    auto ea = [&](const T* p, int i, int j) { return ta ? p[j * a.dim(1) + i] : p[i * a.dim(1) + j]; };
    auto eb = [&](const T* p, int i, int j) { return tb ? p[j * b.dim(1) + i] : p[i * b.dim(1) + j]; };
    Tensor<T> out({m, n});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int kk = 0; kk < k; ++kk) acc += ea(pa, i, kk) * eb(pb, kk, j);
            out[i * n + j] = acc;
        }
    const int ia = pid(tp, a), ib = pid(tp, b);
    if (ia >= 0 || ib >= 0) {
        const int acols = a.dim(1), bcols = b.dim(1);
        tp->record(out, {ia, ib}, [ia, ib, a, b, ta, tb, m, n, k, acols, bcols](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            const T* pa2 = a.ptr();
            const T* pb2 = b.ptr();
            auto a_at = [&](int i, int j) { return ta ? pa2[j * acols + i] : pa2[i * acols + j]; };
            auto b_at = [&](int i, int j) { return tb ? pb2[j * bcols + i] : pb2[i * bcols + j]; };
            if (ia >= 0) {
                auto gas = t.grad_buf(ia);
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        for (int j = 0; j < n; ++j)
                            acc += g[static_cast<size_t>(i * n + j)] * b_at(kk, j);
                        const size_t idx = static_cast<size_t>(ta ? kk * acols + i : i * acols + kk);
                        gas[idx] += acc;
                    }
            }
            if (ib >= 0) {
                auto gbs = t.grad_buf(ib);
                for (int kk = 0; kk < k; ++kk)
                    for (int j = 0; j < n; ++j) {
                        T acc = T(0);
                        for (int i = 0; i < m; ++i)
                            acc += g[static_cast<size_t>(i * n + j)] * a_at(i, kk);
                        const size_t idx = static_cast<size_t>(tb ? j * bcols + kk : kk * bcols + j);
                        gbs[idx] += acc;
                    }
            }
        });
    }
    return out;
}

// batched [N,p,q] x [N,q,r] -> [N,p,r]
template <typename T>
Tensor<T> bmm(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: incompatible " + a.shape_str() + " vs " + b.shape_str());
    const int N = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
    Tensor<T> out({N, p, r});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int nn = 0; nn < N; ++nn) {
        const T* A = pa + static_cast<int64_t>(nn) * p * q;
        const T* B = pb + static_cast<int64_t>(nn) * q * r;
        T* O = po + static_cast<int64_t>(nn) * p * r;
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < r; ++j) {
                T acc = T(0);
                for (int kk = 0; kk < q; ++kk) acc += A[i * q + kk] * B[kk * r + j];
                O[i * r + j] = acc;
            }
    }
    const int ia = pid(tp, a), ib = pid(tp, b);
    if (ia >= 0 || ib >= 0) {
        tp->record(out, {ia, ib}, [=](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            const T* pa2 = a.ptr();
            const T* pb2 = b.ptr();
            for (int nn = 0; nn < N; ++nn) {
                const T* G = g.data() + static_cast<int64_t>(nn) * p * r;
                const T* A = pa2 + static_cast<int64_t>(nn) * p * q;
                const T* B = pb2 + static_cast<int64_t>(nn) * q * r;
                if (ia >= 0) {
                    auto ga = t.grad_buf(ia);
                    T* GA = ga.data() + static_cast<int64_t>(nn) * p * q;
                    for (int i = 0; i < p; ++i)
                        for (int kk = 0; kk < q; ++kk) {
                            T acc = T(0);
                            for (int j = 0; j < r; ++j) acc += G[i * r + j] * B[kk * r + j];
                            GA[i * q + kk] += acc;
                        }
                }
                if (ib >= 0) {
                    auto gb = t.grad_buf(ib);
                    T* GB = gb.data() + static_cast<int64_t>(nn) * q * r;
                    for (int kk = 0; kk < q; ++kk)
                        for (int j = 0; j < r; ++j) {
                            T acc = T(0);
                            for (int i = 0; i < p; ++i) acc += A[i * q + kk] * G[i * r + j];
                            GB[kk * r + j] += acc;
                        }
                }
            }
        });
    }
    return out;
}

// batched [N,p,d] x [N,q,d]^T -> [N,p,q]
template <typename T>
Tensor<T> bmm_nt(Tape<T>* tp, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw ShapeError("bmm_nt: incompatible " + a.shape_str() + " vs " + b.shape_str());
    const int N = a.dim(0), p = a.dim(1), d = a.dim(2), q = b.dim(1);
    Tensor<T> out({N, p, q});
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int nn = 0; nn < N; ++nn) {
        const T* A = pa + static_cast<int64_t>(nn) * p * d;
        const T* B = pb + static_cast<int64_t>(nn) * q * d;
        T* O = po + static_cast<int64_t>(nn) * p * q;
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < q; ++j) {
                T acc = T(0);
                for (int kk = 0; kk < d; ++kk) acc += A[i * d + kk] * B[j * d + kk];
                O[i * q + j] = acc;
            }
    }
    const int ia = pid(tp, a), ib = pid(tp, b);
    if (ia >= 0 || ib >= 0) {
        tp->record(out, {ia, ib}, [=](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            const T* pa2 = a.ptr();
            const T* pb2 = b.ptr();
            for (int nn = 0; nn < N; ++nn) {
                const T* G = g.data() + static_cast<int64_t>(nn) * p * q;
                const T* A = pa2 + static_cast<int64_t>(nn) * p * d;
                const T* B = pb2 + static_cast<int64_t>(nn) * q * d;
                if (ia >= 0) {
                    T* GA = t.grad_buf(ia).data() + static_cast<int64_t>(nn) * p * d;
                    for (int i = 0; i < p; ++i)
                        for (int kk = 0; kk < d; ++kk) {
                            T acc = T(0);
                            for (int j = 0; j < q; ++j) acc += G[i * q + j] * B[j * d + kk];
                            GA[i * d + kk] += acc;
                        }
                }
                if (ib >= 0) {
                    T* GB = t.grad_buf(ib).data() + static_cast<int64_t>(nn) * q * d;
                    for (int j = 0; j < q; ++j)
                        for (int kk = 0; kk < d; ++kk) {
                            T acc = T(0);
                            for (int i = 0; i < p; ++i) acc += G[i * q + j] * A[i * d + kk];
                            GB[j * d + kk] += acc;
                        }
                }
            }
        });
    }
    return out;
}

// softmax over the last dimension
template <typename T>
Tensor<T> softmax_rows(Tape<T>* tp, const Tensor<T>& x) {
    if (x.rank() < 1) throw ShapeError("softmax_rows: rank >= 1 required");
    const int k = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / k;
    Tensor<T> out(x.shape);
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * k;
        T* yr = po + r * k;
        T m = xr[0];
        for (int i = 1; i < k; ++i) m = std::max(m, xr[i]);
        T z = T(0);
        for (int i = 0; i < k; ++i) {
            yr[i] = std::exp(xr[i] - m);
            z += yr[i];
        }
        const T inv = T(1) / z;
        for (int i = 0; i < k; ++i) yr[i] *= inv;
    }
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, out, rows, k](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            auto gx = t.grad_buf(ix);
            const T* py = out.ptr();
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = py + r * k;
                const T* gr = g.data() + r * k;
                T dot = T(0);
                for (int i = 0; i < k; ++i) dot += gr[i] * yr[i];
                T* gxr = gx.data() + r * k;
                for (int i = 0; i < k; ++i) gxr[i] += yr[i] * (gr[i] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// Cross-correlation, stride 1, zero padding. kernel [Cout, Cin/groups, kh, kw].
template <typename T>
Tensor<T> conv2d(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 int groups, int padding) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d: want input [B,Cin,H,W] and kernel [Cout,Cin/g,kh,kw], got " +
                         x.shape_str() + " and " + w.shape_str());
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), Cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0)
        throw ShapeError("conv2d: groups=" + std::to_string(groups) + " must divide Cin=" +
                         std::to_string(Cin) + " and Cout=" + std::to_string(Cout));
    if (Cpg != Cin / groups)
        throw ShapeError("conv2d: kernel expects Cin/groups=" + std::to_string(Cin / groups) +
                         " channels, has " + std::to_string(Cpg));
    if (bias && (bias->rank() != 1 || bias->dim(0) != Cout))
        throw ShapeError("conv2d: bias must be [Cout]");
    const int Ho = H + 2 * padding - kh + 1;
    const int Wo = W + 2 * padding - kw + 1;
    if (Ho <= 0 || Wo <= 0)
        throw ShapeError("conv2d: kernel " + w.shape_str() + " too large for input " + x.shape_str() +
                         " with padding " + std::to_string(padding));
    const int opg = Cout / groups;
    Tensor<T> out({B, Cout, Ho, Wo});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    T* po = out.ptr();
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Cout; ++co) {
            const int g0 = co / opg;
            const T bval = bias ? (*bias)[co] : T(0);
            T* orow = po + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    T acc = bval;
                    for (int ci = 0; ci < Cpg; ++ci) {
                        const T* xin = px + (static_cast<int64_t>(b) * Cin + g0 * Cpg + ci) * H * W;
                        const T* wrow = pw + ((static_cast<int64_t>(co) * Cpg + ci) * kh) * kw;
                        for (int u = 0; u < kh; ++u) {
                            const int yy = i + u - padding;
                            if (yy < 0 || yy >= H) continue;
                            for (int v = 0; v < kw; ++v) {
                                const int xx = j + v - padding;
                                if (xx < 0 || xx >= W) continue;
                                acc += xin[yy * W + xx] * wrow[u * kw + v];
                            }
                        }
                    }
                    orow[i * Wo + j] = acc;
                }
        }
    const int ixp = pid(tp, x), iw = pid(tp, w);
    const int ibias = bias ? pid(tp, *bias) : -1;
    if (ixp >= 0 || iw >= 0 || ibias >= 0) {
        tp->record(out, {ixp, iw, ibias},
                   [=](Tape<T>& t, int self) {
                       auto g = t.grad_buf(self);
                       const T* px2 = x.ptr();
                       const T* pw2 = w.ptr();
                       T* gx = ixp >= 0 ? t.grad_buf(ixp).data() : nullptr;
                       T* gw = iw >= 0 ? t.grad_buf(iw).data() : nullptr;
                       T* gb = ibias >= 0 ? t.grad_buf(ibias).data() : nullptr;
                       for (int b = 0; b < B; ++b)
                           for (int co = 0; co < Cout; ++co) {
                               const int g0 = co / opg;
                               const T* grow = g.data() + (static_cast<int64_t>(b) * Cout + co) * Ho * Wo;
                               for (int i = 0; i < Ho; ++i)
                                   for (int j = 0; j < Wo; ++j) {
                                       const T gv = grow[i * Wo + j];
                                       if (gb) gb[co] += gv;
                                       for (int ci = 0; ci < Cpg; ++ci) {
                                           const int64_t xoff =
                                               (static_cast<int64_t>(b) * Cin + g0 * Cpg + ci) * H * W;
                                           const int64_t woff =
                                               (static_cast<int64_t>(co) * Cpg + ci) * kh * kw;
                                           for (int u = 0; u < kh; ++u) {
                                               const int yy = i + u - padding;
                                               if (yy < 0 || yy >= H) continue;
                                               for (int v = 0; v < kw; ++v) {
                                                   const int xx = j + v - padding;
                                                   if (xx < 0 || xx >= W) continue;
                                                   if (gx) gx[xoff + yy * W + xx] += gv * pw2[woff + u * kw + v];
                                                   if (gw) gw[woff + u * kw + v] += gv * px2[xoff + yy * W + xx];
                                               }
                                           }
                                       }
                                   }
                           }
                   });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Normalizes the channel vector at every spatial position (keeps every op in
// the network local in space). gamma/beta are per channel.
template <typename T>
Tensor<T> layer_norm_channels(Tape<T>* tp, const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, double eps = 1e-5) {
    if (x.rank() != 4) throw ShapeError("layer_norm_channels: want [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("layer_norm_channels: gamma/beta must be [C]");
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<T> out(x.shape);
    Tensor<T> xhat(x.shape);        // saved for backward
    Tensor<T> invstd({B, H, W});    // saved for backward
    const T* px = x.ptr();
    T* po = out.ptr();
    T* ph = xhat.ptr();
    T* pv = invstd.ptr();
    for (int b = 0; b < B; ++b)
        for (int64_t s = 0; s < hw; ++s) {
            T mean = T(0);
            for (int c = 0; c < C; ++c) mean += px[(static_cast<int64_t>(b) * C + c) * hw + s];
            mean /= static_cast<T>(C);
            T var = T(0);
            for (int c = 0; c < C; ++c) {
                const T d = px[(static_cast<int64_t>(b) * C + c) * hw + s] - mean;
                var += d * d;
            }
            var /= static_cast<T>(C);
            const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            pv[b * hw + s] = is;
            for (int c = 0; c < C; ++c) {
                const int64_t idx = (static_cast<int64_t>(b) * C + c) * hw + s;
                const T xh = (px[idx] - mean) * is;
                ph[idx] = xh;
                po[idx] = gamma[c] * xh + beta[c];
            }
        }
    const int ix = pid(tp, x), ig = pid(tp, gamma), ib = pid(tp, beta);
    if (ix >= 0 || ig >= 0 || ib >= 0) {
        tp->record(out, {ix, ig, ib}, [=](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            const T* phat = xhat.ptr();
            const T* pinv = invstd.ptr();
            T* gx = ix >= 0 ? t.grad_buf(ix).data() : nullptr;
            T* gg = ig >= 0 ? t.grad_buf(ig).data() : nullptr;
            T* gb = ib >= 0 ? t.grad_buf(ib).data() : nullptr;
            for (int b = 0; b < B; ++b)
                for (int64_t s = 0; s < hw; ++s) {
                    T mg = T(0), mgx = T(0);
                    for (int c = 0; c < C; ++c) {
                        const int64_t idx = (static_cast<int64_t>(b) * C + c) * hw + s;
                        const T gy = g[static_cast<size_t>(idx)];
                        if (gg) gg[c] += gy * phat[idx];
                        if (gb) gb[c] += gy;
                        const T dxh = gy * gamma[c];
                        mg += dxh;
                        mgx += dxh * phat[idx];
                    }
                    if (gx) {
                        mg /= static_cast<T>(C);
                        mgx /= static_cast<T>(C);
                        const T is = pinv[b * hw + s];
                        for (int c = 0; c < C; ++c) {
                            const int64_t idx = (static_cast<int64_t>(b) * C + c) * hw + s;
                            const T dxh = g[static_cast<size_t>(idx)] * gamma[c];
                            gx[idx] += (dxh - mg - phat[idx] * mgx) * is;
                        }
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// window layout for attention
// ---------------------------------------------------------------------------

// [B,C,H,W] -> [B*nW, ws*ws, C] tokens; windows row-major, tokens row-major
template <typename T>
Tensor<T> window_partition(Tape<T>* tp, const Tensor<T>& x, int ws) {
    if (x.rank() != 4) throw ShapeError("window_partition: want [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (ws <= 0 || H % ws != 0 || W % ws != 0)
        throw ShapeError("window_partition: window size " + std::to_string(ws) +
                         " must divide spatial dims of " + x.shape_str());
    const int ny = H / ws, nx = W / ws, tok = ws * ws;
    Tensor<T> out({B * ny * nx, tok, C});
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int b = 0; b < B; ++b)
        for (int wy = 0; wy < ny; ++wy)
            for (int wx = 0; wx < nx; ++wx) {
                const int64_t wbase = (static_cast<int64_t>(b) * ny * nx + wy * nx + wx) * tok * C;
                for (int ty = 0; ty < ws; ++ty)
                    for (int tx = 0; tx < ws; ++tx)
                        for (int c = 0; c < C; ++c)
                            po[wbase + (ty * ws + tx) * C + c] =
                                px[((static_cast<int64_t>(b) * C + c) * H + wy * ws + ty) * W + wx * ws + tx];
            }
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [=](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            auto gx = t.grad_buf(ix);
            for (int b = 0; b < B; ++b)
                for (int wy = 0; wy < ny; ++wy)
                    for (int wx = 0; wx < nx; ++wx) {
                        const int64_t wbase = (static_cast<int64_t>(b) * ny * nx + wy * nx + wx) * tok * C;
                        for (int ty = 0; ty < ws; ++ty)
                            for (int tx = 0; tx < ws; ++tx)
                                for (int c = 0; c < C; ++c)
                                    gx[static_cast<size_t>(
                                        ((static_cast<int64_t>(b) * C + c) * H + wy * ws + ty) * W +
                                        wx * ws + tx)] += g[static_cast<size_t>(wbase + (ty * ws + tx) * C + c)];
                    }
        });
    }
    return out;
}

// inverse of window_partition
template <typename T>
Tensor<T> window_merge(Tape<T>* tp, const Tensor<T>& t_in, int B, int C, int H, int W, int ws) {
    const int ny = H / ws, nx = W / ws, tok = ws * ws;
    if (t_in.rank() != 3 || t_in.dim(0) != B * ny * nx || t_in.dim(1) != tok || t_in.dim(2) != C)
        throw ShapeError("window_merge: token tensor " + t_in.shape_str() + " does not match target");
    Tensor<T> out({B, C, H, W});
    const T* pt = t_in.ptr();
    T* po = out.ptr();
    for (int b = 0; b < B; ++b)
        for (int wy = 0; wy < ny; ++wy)
            for (int wx = 0; wx < nx; ++wx) {
                const int64_t wbase = (static_cast<int64_t>(b) * ny * nx + wy * nx + wx) * tok * C;
                for (int ty = 0; ty < ws; ++ty)
                    for (int tx = 0; tx < ws; ++tx)
                        for (int c = 0; c < C; ++c)
                            po[((static_cast<int64_t>(b) * C + c) * H + wy * ws + ty) * W + wx * ws + tx] =
                                pt[wbase + (ty * ws + tx) * C + c];
            }
    const int ix = pid(tp, t_in);
    if (ix >= 0) {
        tp->record(out, {ix}, [=](Tape<T>& t, int self) {
            auto g = t.grad_buf(self);
            auto gt = t.grad_buf(ix);
            for (int b = 0; b < B; ++b)
                for (int wy = 0; wy < ny; ++wy)
                    for (int wx = 0; wx < nx; ++wx) {
                        const int64_t wbase = (static_cast<int64_t>(b) * ny * nx + wy * nx + wx) * tok * C;
                        for (int ty = 0; ty < ws; ++ty)
                            for (int tx = 0; tx < ws; ++tx)
                                for (int c = 0; c < C; ++c)
                                    gt[static_cast<size_t>(wbase + (ty * ws + tx) * C + c)] +=
                                        g[static_cast<size_t>(
                                            ((static_cast<int64_t>(b) * C + c) * H + wy * ws + ty) * W +
                                            wx * ws + tx)];
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// mean over elements of the Huber-style branch; target is a constant
template <typename T>
Tensor<T> smooth_l1_mean(Tape<T>* tp, const Tensor<T>& pred, const Tensor<T>& target, double beta) {
    check_same_shape(pred, target, "smooth_l1");
    if (beta <= 0) throw ConfigError("smooth_l1: beta must be positive");
    const T bt = static_cast<T>(beta);
    const int64_t n = pred.numel();
    const T* pp = pred.ptr();
    const T* pt = target.ptr();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const T d = pp[i] - pt[i];
        const T ad = std::abs(d);
        acc += ad < bt ? T(0.5) * d * d / bt : ad - T(0.5) * bt;
    }
    Tensor<T> out({1});
    out[0] = acc / static_cast<T>(n);
    const int ip = pid(tp, pred);
    if (ip >= 0) {
        tp->record(out, {ip}, [ip, pred, target, bt, n](Tape<T>& t, int self) {
            const T g = t.grad_buf(self)[0] / static_cast<T>(n);
            auto gp = t.grad_buf(ip);
            const T* pp2 = pred.ptr();
            const T* pt2 = target.ptr();
            for (int64_t i = 0; i < n; ++i) {
                const T d = pp2[i] - pt2[i];
                const T dd = std::abs(d) < bt ? d / bt : (d > T(0) ? T(1) : T(-1));
                gp[static_cast<size_t>(i)] += g * dd;
            }
        });
    }
    return out;
}

// Mean squared 5-point stencil response over interior pixels. Boundary pixels
// are excluded so zero padding artifacts are not penalized. Accepts [H,W] or
// any rank >= 2 tensor whose trailing two dims are spatial.
template <typename T>
Tensor<T> laplacian_penalty(Tape<T>* tp, const Tensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("laplacian_penalty: rank >= 2 required");
    const int W = x.dim(x.rank() - 1);
    const int H = x.dim(x.rank() - 2);
    if (H < 3 || W < 3)
        throw ShapeError("laplacian_penalty: spatial dims must be >= 3, got " + x.shape_str());
    const int64_t nb = x.numel() / (static_cast<int64_t>(H) * W);
    const int64_t n_int = nb * (H - 2) * (W - 2);
    const T* px = x.ptr();
    T acc = T(0);
    for (int64_t b = 0; b < nb; ++b) {
        const T* f = px + b * H * W;
        for (int i = 1; i + 1 < H; ++i)
            for (int j = 1; j + 1 < W; ++j) {
                const T r = f[(i - 1) * W + j] + f[(i + 1) * W + j] + f[i * W + j - 1] +
                            f[i * W + j + 1] - T(4) * f[i * W + j];
                acc += r * r;
            }
    }
    Tensor<T> out({1});
    out[0] = acc / static_cast<T>(n_int);
    const int ix = pid(tp, x);
    if (ix >= 0) {
        tp->record(out, {ix}, [ix, x, nb, H, W, n_int](Tape<T>& t, int self) {
            const T g = t.grad_buf(self)[0] * T(2) / static_cast<T>(n_int);
            auto gx = t.grad_buf(ix);
            const T* px2 = x.ptr();
            for (int64_t b = 0; b < nb; ++b) {
                const T* f = px2 + b * H * W;
                T* gf = gx.data() + b * H * W;
                for (int i = 1; i + 1 < H; ++i)
                    for (int j = 1; j + 1 < W; ++j) {
                        const T r = f[(i - 1) * W + j] + f[(i + 1) * W + j] + f[i * W + j - 1] +
                                    f[i * W + j + 1] - T(4) * f[i * W + j];
                        const T gr = g * r;
                        gf[(i - 1) * W + j] += gr;
                        gf[(i + 1) * W + j] += gr;
                        gf[i * W + j - 1] += gr;
                        gf[i * W + j + 1] += gr;
                        gf[i * W + j] -= T(4) * gr;
                    }
            }
        });
    }
    return out;
}

}  // namespace nests6::ops
