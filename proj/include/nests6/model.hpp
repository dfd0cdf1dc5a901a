#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "nests6/attention.hpp"
#include "nests6/memory.hpp"
#include "nests6/ops.hpp"
#include "nests6/rng.hpp"
#include "nests6/scan.hpp"
#include "nests6/tensor.hpp"

namespace nests6 {

// softplus floor keeping the step size strictly positive
inline constexpr double kDeltaMin = 1e-4;

struct ModelConfig {
    int channels = 16;   // latent width D
    int state_dim = 4;   // states per channel Ds
    int n_blocks = 2;
    int window_size = 0;  // 0 = auto: largest divisor of both patch dims <= 5
    int low_rank = 2;     // rank of the input-conditioned decay modulation, 0 disables
    int patch_h = 10;
    int patch_w = 10;
    int t_window = 6;
    bool use_memory = true;

    int resolved_window() const {
        if (window_size > 0) return window_size;
        for (int w = 5; w >= 1; --w)
            if (patch_h % w == 0 && patch_w % w == 0) return w;
        return 1;
    }

    void validate() const {
        if (channels < 1 || state_dim < 1 || n_blocks < 1 || patch_h < 1 || patch_w < 1 ||
            t_window < 1)
            throw ConfigError("model config: all sizes must be positive");
        if (low_rank < 0 || low_rank > state_dim)
            throw ConfigError("model config: low_rank must be in [0, state_dim]");
        const int w = resolved_window();
        if (patch_h % w != 0 || patch_w % w != 0)
            throw ConfigError("model config: window_size " + std::to_string(w) +
                              " must divide patch dims " + std::to_string(patch_h) + "x" +
                              std::to_string(patch_w));
    }

    bool same_architecture(const ModelConfig& o) const {
        return channels == o.channels && state_dim == o.state_dim && n_blocks == o.n_blocks &&
               resolved_window() == o.resolved_window() && low_rank == o.low_rank &&
               patch_h == o.patch_h && patch_w == o.patch_w && t_window == o.t_window &&
               use_memory == o.use_memory;
    }
};

// Input lift: channel 0 carries the frame, channel 1 its first temporal
// difference with x_{-1} := x_0 (so the first step's difference is zero).
// Input [T,B,H,W]; output [T*B, 2, H, W], step-major. Off-tape by design:
// windows are data, not parameters.
template <typename T>
Tensor<T> build_input(const Tensor<T>& x_seq) {
    if (x_seq.rank() != 4) throw ShapeError("build_input: want [T,B,H,W], got " + x_seq.shape_str());
    const int Ts = x_seq.dim(0), B = x_seq.dim(1), H = x_seq.dim(2), W = x_seq.dim(3);
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<T> u({Ts * B, 2, H, W});
    const T* px = x_seq.ptr();
    T* pu = u.ptr();
    for (int t = 0; t < Ts; ++t)
        for (int b = 0; b < B; ++b) {
            const T* cur = px + (static_cast<int64_t>(t) * B + b) * hw;
            const T* prev = t > 0 ? px + (static_cast<int64_t>(t - 1) * B + b) * hw : cur;
            T* dst = pu + (static_cast<int64_t>(t) * B + b) * 2 * hw;
            for (int64_t i = 0; i < hw; ++i) {
                dst[i] = cur[i];
                dst[hw + i] = cur[i] - prev[i];
            }
        }
    return u;
}

// Spatially varying per-step scan coefficients. Coefficient fields are shared
// across the D model channels (shape [N, Ds, H, W], N = steps*batch).
template <typename T>
struct SsmParams {
    Tensor<T> delta;
    Tensor<T> a_eff;
    Tensor<T> b_eff;
    Tensor<T> c_eff;
    Tensor<T> d_skip;  // [D]
};

template <typename T>
struct BlockParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> dw_w, dw_b;  // depthwise 3x3
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;  // attention 1x1 projections
    Tensor<T> delta_w, delta_b;
    Tensor<T> bmat_w, bmat_b;
    Tensor<T> cmat_w, cmat_b;
    Tensor<T> a_base;      // [Ds]
    Tensor<T> lr_u, lr_v;  // [Ds,r], [D,r] when low_rank > 0
    Tensor<T> d_skip;      // [D]
};

template <typename T>
struct ForwardOut {
    Tensor<T> y_hat;   // [B, 1, H, W]
    Tensor<T> m_next;  // detached post-write memory; empty when memory unused
};

template <typename T>
class NestModel {
public:
    ModelConfig cfg;
    Tensor<T> stem_w, stem_b;
    std::vector<BlockParams<T>> blocks;
    Tensor<T> head_w, head_b;
    DeepOptimizer2D<T> slow;

    NestModel() = default;

    explicit NestModel(const ModelConfig& c, Rng init_rng) : cfg(c) {
        cfg.validate();
        const int D = cfg.channels, Ds = cfg.state_dim, r = cfg.low_rank;
        stem_w = conv_init({D, 2, 3, 3}, init_rng);
        stem_b = Tensor<T>({D});
        blocks.resize(static_cast<size_t>(cfg.n_blocks));
        for (auto& blk : blocks) {
            blk.ln1_g = Tensor<T>::full({D}, T(1));
            blk.ln1_b = Tensor<T>({D});
            blk.dw_w = conv_init({D, 1, 3, 3}, init_rng);
            blk.dw_b = Tensor<T>({D});
            blk.ln2_g = Tensor<T>::full({D}, T(1));
            blk.ln2_b = Tensor<T>({D});
            blk.q_w = conv_init({D, D, 1, 1}, init_rng);
            blk.q_b = Tensor<T>({D});
            blk.k_w = conv_init({D, D, 1, 1}, init_rng);
            blk.k_b = Tensor<T>({D});
            blk.v_w = conv_init({D, D, 1, 1}, init_rng);
            blk.v_b = Tensor<T>({D});
            blk.o_w = conv_init({D, D, 1, 1}, init_rng);
            blk.o_b = Tensor<T>({D});
            blk.delta_w = conv_init({Ds, D, 1, 1}, init_rng);
            blk.delta_b = Tensor<T>({Ds});
            blk.bmat_w = conv_init({Ds, D, 1, 1}, init_rng);
            blk.bmat_b = Tensor<T>({Ds});
            blk.cmat_w = conv_init({Ds, D, 1, 1}, init_rng);
            blk.cmat_b = Tensor<T>({Ds});
            // spread initial decay rates over the state channels
            blk.a_base = Tensor<T>({Ds});
            for (int s = 0; s < Ds; ++s)
                blk.a_base[s] = static_cast<T>(
                    std::log(0.5 + 0.5 * static_cast<double>(s) / std::max(1, Ds - 1)));
            if (r > 0) {
                blk.lr_u = scaled_init({Ds, r}, init_rng, 0.05);
                blk.lr_v = scaled_init({D, r}, init_rng, 0.05);
            }
            blk.d_skip = Tensor<T>::full({D}, T(1));
        }
        // zero-init readout: an untrained model predicts the normalized mean,
        // which keeps free-running rollouts bounded from the start
        head_w = Tensor<T>({1, D, 1, 1});
        head_b = Tensor<T>({1});
        if (cfg.use_memory) {
            slow.phi1_w = conv_init({D, D + 1, 1, 1}, init_rng);
            slow.phi1_b = Tensor<T>({D});
            slow.phi2_w = conv_init({D, D, 1, 1}, init_rng);
            slow.phi2_b = Tensor<T>({D});
            slow.gate_w = conv_init({D, D, 1, 1}, init_rng);
            // open the gate at init so the memory path participates from the start
            slow.gate_b = Tensor<T>::full({D}, T(1));
            slow.lambda_logit = Tensor<T>::scalar(static_cast<T>(std::log(0.9 / 0.1)));
        }
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.emplace_back("stem.w", &stem_w);
        out.emplace_back("stem.b", &stem_b);
        for (size_t i = 0; i < blocks.size(); ++i) {
            auto& b = blocks[i];
            const std::string p = "block" + std::to_string(i) + ".";
            out.emplace_back(p + "ln1.g", &b.ln1_g);
            out.emplace_back(p + "ln1.b", &b.ln1_b);
            out.emplace_back(p + "dw.w", &b.dw_w);
            out.emplace_back(p + "dw.b", &b.dw_b);
            out.emplace_back(p + "ln2.g", &b.ln2_g);
            out.emplace_back(p + "ln2.b", &b.ln2_b);
            out.emplace_back(p + "attn.q.w", &b.q_w);
            out.emplace_back(p + "attn.q.b", &b.q_b);
            out.emplace_back(p + "attn.k.w", &b.k_w);
            out.emplace_back(p + "attn.k.b", &b.k_b);
            out.emplace_back(p + "attn.v.w", &b.v_w);
            out.emplace_back(p + "attn.v.b", &b.v_b);
            out.emplace_back(p + "attn.o.w", &b.o_w);
            out.emplace_back(p + "attn.o.b", &b.o_b);
            out.emplace_back(p + "par.delta.w", &b.delta_w);
            out.emplace_back(p + "par.delta.b", &b.delta_b);
            out.emplace_back(p + "par.b.w", &b.bmat_w);
            out.emplace_back(p + "par.b.b", &b.bmat_b);
            out.emplace_back(p + "par.c.w", &b.cmat_w);
            out.emplace_back(p + "par.c.b", &b.cmat_b);
            out.emplace_back(p + "a_base", &b.a_base);
            if (cfg.low_rank > 0) {
                out.emplace_back(p + "a_mod.u", &b.lr_u);
                out.emplace_back(p + "a_mod.v", &b.lr_v);
            }
            out.emplace_back(p + "d_skip", &b.d_skip);
        }
        out.emplace_back("head.w", &head_w);
        out.emplace_back("head.b", &head_b);
        if (cfg.use_memory) {
            out.emplace_back("slow.phi1.w", &slow.phi1_w);
            out.emplace_back("slow.phi1.b", &slow.phi1_b);
            out.emplace_back("slow.phi2.w", &slow.phi2_w);
            out.emplace_back("slow.phi2.b", &slow.phi2_b);
            out.emplace_back("slow.gate.w", &slow.gate_w);
            out.emplace_back("slow.gate.b", &slow.gate_b);
            out.emplace_back("slow.lambda_logit", &slow.lambda_logit);
        }
        return out;
    }

    void watch_params(Tape<T>& tape) {
        for (auto& [name, p] : named_params()) tape.watch(*p);
    }

    // FNV-1a over the raw parameter bytes, in declaration order. Used by the
    // evaluation paths to assert that they never write a parameter.
    uint64_t param_checksum() {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (auto& [name, p] : named_params()) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(p->ptr());
            const size_t nb = p->buf->size() * sizeof(T);
            for (size_t i = 0; i < nb; ++i) {
                h ^= bytes[i];
                h *= 0x100000001b3ULL;
            }
        }
        return h;
    }

    // Latent sequence after stem (and memory injection when enabled), plus the
    // tape-linked post-write memory. z is step-major [T*B, D, H, W].
    struct Latent {
        Tensor<T> z;
        Tensor<T> m_tape;  // empty if no memory in play
    };

    Latent encode(Tape<T>* tp, const Tensor<T>& x_seq, MemoryState<T>* mem,
                  const Surprise<T>* surprise) const {
        if (x_seq.rank() != 4) throw ShapeError("forward: want x_seq [T,B,H,W]");
        const int Ts = x_seq.dim(0), B = x_seq.dim(1);
        if (x_seq.dim(2) != cfg.patch_h || x_seq.dim(3) != cfg.patch_w)
            throw ShapeError("forward: window " + x_seq.shape_str() + " does not match patch " +
                             std::to_string(cfg.patch_h) + "x" + std::to_string(cfg.patch_w));
        auto u = build_input(x_seq);
        auto z = ops::silu(tp, ops::conv2d(tp, u, stem_w, &stem_b, 1, 1));
        Latent out;
        if (cfg.use_memory && mem) {
            if (mem->m.rank() != 4 || mem->m.dim(0) != B)
                throw ShapeError("forward: memory state " + mem->m.shape_str() +
                                 " does not match batch " + std::to_string(B));
            if (mem->mode == MemoryMode::teacher_forced) {
                auto z_last = ops::slice_step(tp, z, Ts, Ts - 1);
                Tensor<T> s = surprise ? surprise->s
                                       : Tensor<T>({B, 1, cfg.patch_h, cfg.patch_w});
                out.m_tape = memory_write(tp, *mem, z_last, s, slow);
            } else {
                out.m_tape = mem->m.detached();
            }
            z = memory_inject(tp, z, out.m_tape, slow, Ts);
        }
        out.z = std::move(z);
        return out;
    }

    ForwardOut<T> forward(Tape<T>* tp, const Tensor<T>& x_seq, MemoryState<T>* mem,
                          const Surprise<T>* surprise) const {
        const int Ts = x_seq.dim(0), B = x_seq.dim(1);
        Latent lat = encode(tp, x_seq, mem, surprise);
        Tensor<T> z = lat.z;
        for (const auto& blk : blocks) z = block_forward(tp, z, blk, Ts, B);
        auto z_last = ops::slice_step(tp, z, Ts, Ts - 1);
        ForwardOut<T> out;
        out.y_hat = ops::conv2d(tp, z_last, head_w, &head_b, 1, 0);
        if (lat.m_tape.numel() > 0 && mem && mem->mode == MemoryMode::teacher_forced)
            out.m_next = lat.m_tape.detached();
        return out;
    }

    // Single-window convenience wrapper: [T,H,W] in, [H,W] out.
    Tensor<T> predict_patch(const Tensor<T>& window, MemoryState<T>* mem = nullptr,
                            const Surprise<T>* surprise = nullptr) const {
        if (window.rank() != 3) throw ShapeError("predict_patch: want [T,H,W]");
        Tensor<T> x = window.detached();
        x.shape = {window.dim(0), 1, window.dim(1), window.dim(2)};
        auto out = forward(nullptr, x, mem, surprise);
        Tensor<T> y = out.y_hat.detached();
        y.shape = {window.dim(1), window.dim(2)};
        if (mem && mem->mode == MemoryMode::teacher_forced && out.m_next.numel() > 0)
            mem->m = out.m_next;
        return y;
    }

    // Scan coefficients for one block given its mixed latent (step-major).
    SsmParams<T> predict_params(Tape<T>* tp, const Tensor<T>& z, const BlockParams<T>& blk) const {
        SsmParams<T> p;
        p.delta = ops::affine(tp, ops::softplus(tp, ops::conv2d(tp, z, blk.delta_w, &blk.delta_b, 1, 0)),
                              1.0, kDeltaMin);
        p.b_eff = ops::conv2d(tp, z, blk.bmat_w, &blk.bmat_b, 1, 0);
        p.c_eff = ops::conv2d(tp, z, blk.cmat_w, &blk.cmat_b, 1, 0);
        const int N = z.dim(0), H = z.dim(2), W = z.dim(3);
        if (cfg.low_rank > 0) {
            auto pooled = ops::spatial_mean(tp, z);                          // [N, D]
            auto coeff = ops::matmul2d(tp, pooled, blk.lr_v, false, false);  // [N, r]
            auto mod = ops::matmul2d(tp, coeff, blk.lr_u, false, true);      // [N, Ds]
            auto raw = ops::add_rowvec(tp, mod, blk.a_base);
            p.a_eff = ops::broadcast_spatial(tp, ops::affine(tp, ops::exp_(tp, raw), -1.0, 0.0), N, H, W);
        } else {
            auto neg = ops::affine(tp, ops::exp_(tp, blk.a_base), -1.0, 0.0);  // [Ds]
            p.a_eff = ops::broadcast_spatial(tp, neg, N, H, W);
        }
        p.d_skip = blk.d_skip;
        return p;
    }

    Tensor<T> local_mix(Tape<T>* tp, const Tensor<T>& z, const BlockParams<T>& blk) const {
        auto n1 = ops::layer_norm_channels(tp, z, blk.ln1_g, blk.ln1_b);
        auto zd = ops::add(tp, z, ops::conv2d(tp, n1, blk.dw_w, &blk.dw_b, cfg.channels, 1));
        auto n2 = ops::layer_norm_channels(tp, zd, blk.ln2_g, blk.ln2_b);
        return ops::add(tp, zd, nests6::windowed_attention(tp, n2, cfg.resolved_window(), attn_proj(blk)));
    }

    AttnProj<T> attn_proj(const BlockParams<T>& blk) const {
        return AttnProj<T>{blk.q_w, blk.q_b, blk.k_w, blk.k_b,
                           blk.v_w, blk.v_b, blk.o_w, blk.o_b};
    }

    Tensor<T> block_forward(Tape<T>* tp, const Tensor<T>& z_in, const BlockParams<T>& blk, int Ts,
                            int B) const {
        auto z = local_mix(tp, z_in, blk);
        auto p = predict_params(tp, z, blk);
        Tensor<T> h0({B, cfg.channels, cfg.state_dim, cfg.patch_h, cfg.patch_w});
        auto y = ops::ssm_scan(tp, z, Ts, p.delta, p.a_eff, p.b_eff, p.c_eff, p.d_skip, h0);
        return ops::add(tp, z, y);
    }

private:
    static Tensor<T> conv_init(std::vector<int> shape, Rng& rng) {
        const double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
        const double k = 1.0 / std::sqrt(fan_in);
        Tensor<T> t(std::move(shape));
        for (auto& v : *t.buf) v = static_cast<T>(rng.uniform(-k, k));
        return t;
    }

    static Tensor<T> scaled_init(std::vector<int> shape, Rng& rng, double scale) {
        Tensor<T> t(std::move(shape));
        for (auto& v : *t.buf) v = static_cast<T>(rng.uniform(-scale, scale));
        return t;
    }
};

}  // namespace nests6
