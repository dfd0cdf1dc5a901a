#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nests6/ops.hpp"
#include "nests6/tensor.hpp"

namespace nests6::ops {

// Selective state-space scan over a step-major stack.
//
//   h_t = exp(a ⊙ Δ) ⊙ h_{t-1} + (Δ ⊙ x_t) ⊙ b
//   y_t = Σ_s h_t^{(s)} ⊙ c^{(s)} + d_skip ⊙ x_t
//
// Shapes: x_seq [T*B, D, H, W]; delta/a_eff/b_eff/c_eff [T*B, Ds, H, W]
// (coefficient fields are shared across the D model channels); d_skip [D];
// h0 [B, D, Ds, H, W]. Returns y_seq [T*B, D, H, W]; h_last, when requested,
// is a detached copy of the final state.
//
// The per-element expression order is fixed (decay*h + (dl*x)*b) so that a
// scalar reference loop written with the same expressions reproduces the scan
// bit-for-bit in double precision.
template <typename T>
Tensor<T> ssm_scan(Tape<T>* tp, const Tensor<T>& x_seq, int T_steps, const Tensor<T>& delta,
                   const Tensor<T>& a_eff, const Tensor<T>& b_eff, const Tensor<T>& c_eff,
                   const Tensor<T>& d_skip, const Tensor<T>& h0, Tensor<T>* h_last = nullptr) {
    if (x_seq.rank() != 4 || T_steps <= 0 || x_seq.dim(0) % T_steps != 0)
        throw ShapeError("ssm_scan: x_seq " + x_seq.shape_str() + " not divisible into " +
                         std::to_string(T_steps) + " steps");
    const int B = x_seq.dim(0) / T_steps;
    const int D = x_seq.dim(1), H = x_seq.dim(2), W = x_seq.dim(3);
    check_same_shape(delta, a_eff, "ssm_scan coefficients");
    check_same_shape(delta, b_eff, "ssm_scan coefficients");
    check_same_shape(delta, c_eff, "ssm_scan coefficients");
    if (delta.rank() != 4 || delta.dim(0) != T_steps * B || delta.dim(2) != H || delta.dim(3) != W)
        throw ShapeError("ssm_scan: coefficient shape " + delta.shape_str() + " does not match input");
    const int Ds = delta.dim(1);
    if (d_skip.numel() != D) throw ShapeError("ssm_scan: d_skip must be [D]");
    if (h0.rank() != 5 || h0.dim(0) != B || h0.dim(1) != D || h0.dim(2) != Ds || h0.dim(3) != H ||
        h0.dim(4) != W)
        throw ShapeError("ssm_scan: h0 " + h0.shape_str() + " must be [B,D,Ds,H,W]");

    const int64_t hw = static_cast<int64_t>(H) * W;
    const int64_t state_n = static_cast<int64_t>(B) * D * Ds * hw;

    Tensor<T> y({T_steps * B, D, H, W});
    // saved per-step states and decay factors for the reverse sweep
    Tensor<T> h_all({T_steps, B, D, Ds, H, W});
    Tensor<T> dec_all(delta.shape);

    {
        const T* px = x_seq.ptr();
        const T* pdl = delta.ptr();
        const T* pa = a_eff.ptr();
        const T* pb = b_eff.ptr();
        const T* pc = c_eff.ptr();
        const T* pdsk = d_skip.ptr();
        T* py = y.ptr();
        T* ph_all = h_all.ptr();
        T* pdec = dec_all.ptr();

        std::vector<T> h(h0.buf->begin(), h0.buf->end());
        for (int t = 0; t < T_steps; ++t) {
            for (int b = 0; b < B; ++b) {
                const int64_t coef0 = (static_cast<int64_t>(t) * B + b) * Ds * hw;
                for (int64_t i = coef0; i < coef0 + Ds * hw; ++i) pdec[i] = std::exp(pa[i] * pdl[i]);
                for (int d = 0; d < D; ++d) {
                    const int64_t xoff = ((static_cast<int64_t>(t) * B + b) * D + d) * hw;
                    T* hrow = h.data() + (static_cast<int64_t>(b) * D + d) * Ds * hw;
                    bool ok = true;
                    for (int64_t p = 0; p < hw; ++p) {
                        const T xv = px[xoff + p];
                        T acc = pdsk[d] * xv;
                        for (int s = 0; s < Ds; ++s) {
                            const int64_t cf = coef0 + s * hw + p;
                            T& hv = hrow[s * hw + p];
                            hv = pdec[cf] * hv + (pdl[cf] * xv) * pb[cf];
                            ok = ok && std::isfinite(static_cast<double>(hv));
                            acc += hv * pc[cf];
                        }
                        py[xoff + p] = acc;
                    }
                    if (!ok)
                        throw NumericError("ssm_scan: non-finite state at step " + std::to_string(t));
                }
            }
            std::copy_n(h.data(), state_n, ph_all + static_cast<int64_t>(t) * state_n);
        }
        if (h_last) {
            *h_last = Tensor<T>({B, D, Ds, H, W});
            std::copy_n(h.data(), state_n, h_last->ptr());
        }
    }

    const int ix = pid(tp, x_seq), idl = pid(tp, delta), ia = pid(tp, a_eff);
    const int ib = pid(tp, b_eff), ic = pid(tp, c_eff), idsk = pid(tp, d_skip), ih0 = pid(tp, h0);
    if (ix >= 0 || idl >= 0 || ia >= 0 || ib >= 0 || ic >= 0 || idsk >= 0 || ih0 >= 0) {
        tp->record(y, {ix, idl, ia, ib, ic, idsk, ih0}, [=](Tape<T>& t, int self) {
            auto gy = t.grad_buf(self);
            const T* px = x_seq.ptr();
            const T* pdl = delta.ptr();
            const T* pa = a_eff.ptr();
            const T* pb = b_eff.ptr();
            const T* pc = c_eff.ptr();
            const T* pdsk = d_skip.ptr();
            const T* ph_all = h_all.ptr();
            const T* pdec = dec_all.ptr();
            const T* ph0 = h0.ptr();
            T* gx = ix >= 0 ? t.grad_buf(ix).data() : nullptr;
            T* gdl = idl >= 0 ? t.grad_buf(idl).data() : nullptr;
            T* ga = ia >= 0 ? t.grad_buf(ia).data() : nullptr;
            T* gb = ib >= 0 ? t.grad_buf(ib).data() : nullptr;
            T* gc = ic >= 0 ? t.grad_buf(ic).data() : nullptr;
            T* gdsk = idsk >= 0 ? t.grad_buf(idsk).data() : nullptr;
            T* gh0 = ih0 >= 0 ? t.grad_buf(ih0).data() : nullptr;

            std::vector<T> gh(static_cast<size_t>(state_n), T(0));
            for (int tt = T_steps - 1; tt >= 0; --tt) {
                const T* h_t = ph_all + static_cast<int64_t>(tt) * state_n;
                const T* h_prev = tt > 0 ? ph_all + static_cast<int64_t>(tt - 1) * state_n : ph0;
                for (int b = 0; b < B; ++b) {
                    const int64_t coef0 = (static_cast<int64_t>(tt) * B + b) * Ds * hw;
                    for (int d = 0; d < D; ++d) {
                        const int64_t xoff = ((static_cast<int64_t>(tt) * B + b) * D + d) * hw;
                        const int64_t hoff = (static_cast<int64_t>(b) * D + d) * Ds * hw;
                        for (int64_t p = 0; p < hw; ++p) {
                            const T gyv = gy[static_cast<size_t>(xoff + p)];
                            const T xv = px[xoff + p];
                            if (gdsk) gdsk[d] += gyv * xv;
                            T gxv = gyv * pdsk[d];
                            for (int s = 0; s < Ds; ++s) {
                                const int64_t cf = coef0 + s * hw + p;
                                const int64_t hi = hoff + s * hw + p;
                                // y_t readout contribution
                                T ghv = gh[static_cast<size_t>(hi)] + gyv * pc[cf];
                                if (gc) gc[cf] += gyv * h_t[hi];
                                // recurrence contributions
                                const T gdec = ghv * h_prev[hi];
                                if (ga) ga[cf] += gdec * pdec[cf] * pdl[cf];
                                if (gdl)
                                    gdl[cf] += gdec * pdec[cf] * pa[cf] + ghv * xv * pb[cf];
                                if (gb) gb[cf] += ghv * pdl[cf] * xv;
                                gxv += ghv * pdl[cf] * pb[cf];
                                gh[static_cast<size_t>(hi)] = ghv * pdec[cf];
                            }
                            if (gx) gx[xoff + p] += gxv;
                        }
                    }
                }
            }
            if (gh0) axpy_into(std::span<T>(gh0, static_cast<size_t>(state_n)), gh.data(), state_n);
        });
    }
    return y;
}

}  // namespace nests6::ops
