#pragma once

#include <cmath>

#include "nests6/ops.hpp"
#include "nests6/tensor.hpp"

namespace nests6 {

// Learned 1x1 projections for single-head windowed attention.
template <typename T>
struct AttnProj {
    Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
};

// Scaled dot-product attention over the ws x ws pixels of each non-overlapping
// window; no cross-window mixing. Tokens are pixels, token features are the C
// channels (one head, d_head = C).
template <typename T>
Tensor<T> windowed_attention(Tape<T>* tp, const Tensor<T>& x, int wsize, const AttnProj<T>& proj) {
    if (x.rank() != 4) throw ShapeError("windowed_attention: want [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (wsize <= 0 || H % wsize != 0 || W % wsize != 0)
        throw ShapeError("windowed_attention: window " + std::to_string(wsize) +
                         " must divide spatial dims of " + x.shape_str());
    auto q = ops::window_partition(tp, ops::conv2d(tp, x, proj.q_w, &proj.q_b, 1, 0), wsize);
    auto k = ops::window_partition(tp, ops::conv2d(tp, x, proj.k_w, &proj.k_b, 1, 0), wsize);
    auto v = ops::window_partition(tp, ops::conv2d(tp, x, proj.v_w, &proj.v_b, 1, 0), wsize);
    auto logits = ops::affine(tp, ops::bmm_nt(tp, q, k), 1.0 / std::sqrt(static_cast<double>(C)), 0.0);
    auto att = ops::softmax_rows(tp, logits);
    auto mixed = ops::window_merge(tp, ops::bmm(tp, att, v), B, C, H, W, wsize);
    return ops::conv2d(tp, mixed, proj.o_w, &proj.o_b, 1, 0);
}

}  // namespace nests6
