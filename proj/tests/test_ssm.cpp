#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nests6/model.hpp"
#include "oracles.hpp"

using namespace nests6;
using oracle::random_tensor;

TEST_CASE("build_input: constant sequence has a zero difference channel") {
    Tensor<float> x = Tensor<float>::full({4, 1, 3, 3}, 2.5f);
    auto u = build_input(x);
    REQUIRE(u.shape == std::vector<int>{4, 2, 3, 3});
    for (int t = 0; t < 4; ++t)
        for (int i = 0; i < 9; ++i) {
            CHECK(u[(t * 2 + 0) * 9 + i] == 2.5f);
            CHECK(u[(t * 2 + 1) * 9 + i] == 0.0f);
        }
}

TEST_CASE("build_input: T=1 difference is zero by the x_{-1}=x_0 convention") {
    Rng rng(2);
    auto x = random_tensor<float>({1, 1, 2, 2}, rng);
    auto u = build_input(x);
    for (int i = 0; i < 4; ++i) {
        CHECK(u[i] == x[i]);
        CHECK(u[4 + i] == 0.0f);
    }
}

TEST_CASE("build_input: second step difference equals B - A") {
    Rng rng(3);
    auto a = random_tensor<float>({2, 2}, rng);
    auto b = random_tensor<float>({2, 2}, rng);
    Tensor<float> x({2, 1, 2, 2});
    for (int i = 0; i < 4; ++i) {
        x[i] = a[i];
        x[4 + i] = b[i];
    }
    auto u = build_input(x);
    for (int i = 0; i < 4; ++i) {
        CHECK(u[(1 * 2 + 0) * 4 + i] == b[i]);
        CHECK(u[(1 * 2 + 1) * 4 + i] == b[i] - a[i]);
    }
}

TEST_CASE("stem: zero input with zero bias maps to zero") {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.window_size = 2;
    NestModel<float> m(cfg, Rng(5));
    Tensor<float> u({3 * 1, 2, 4, 4});
    auto z = ops::silu<float>(nullptr, ops::conv2d<float>(nullptr, u, m.stem_w, &m.stem_b, 1, 1));
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(z[i] == 0.0f);
}

TEST_CASE("stem: interior shift equivariance") {
    ModelConfig cfg;
    cfg.channels = 3;
    cfg.patch_h = cfg.patch_w = 6;
    NestModel<double> m(cfg, Rng(7));
    Rng rng(11);
    auto u = random_tensor<double>({1, 2, 6, 6}, rng);
    // shift the input by one cell down/right
    Tensor<double> us({1, 2, 6, 6});
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j)
                us[(c * 6 + i + 1) * 6 + j + 1] = u[(c * 6 + i) * 6 + j];
    auto z = ops::silu<double>(nullptr, ops::conv2d<double>(nullptr, u, m.stem_w, &m.stem_b, 1, 1));
    auto zs = ops::silu<double>(nullptr, ops::conv2d<double>(nullptr, us, m.stem_w, &m.stem_b, 1, 1));
    // interior pixels away from both borders must shift identically
    for (int c = 0; c < 3; ++c)
        for (int i = 1; i < 4; ++i)
            for (int j = 1; j < 4; ++j)
                CHECK(zs[(c * 6 + i + 1) * 6 + j + 1] ==
                      doctest::Approx(z[(c * 6 + i) * 6 + j]).epsilon(1e-12));
}

TEST_CASE("stem: impulse response support is at most 3x3") {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.patch_h = cfg.patch_w = 7;
    NestModel<double> m(cfg, Rng(13));
    for (auto& v : *m.stem_b.buf) v = 0.0;  // bias would fill the whole map
    Tensor<double> u({1, 2, 7, 7});
    u[(0 * 7 + 3) * 7 + 3] = 1.0;  // unit impulse at center of channel 0
    auto z = ops::silu<double>(nullptr, ops::conv2d<double>(nullptr, u, m.stem_w, &m.stem_b, 1, 1));
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 7; ++j)
                if (std::abs(i - 3) > 1 || std::abs(j - 3) > 1)
                    CHECK(z[(c * 7 + i) * 7 + j] == 0.0);
}

TEST_CASE("local_mix: zero-contribution branches pass the input through") {
    ModelConfig cfg;
    cfg.channels = 3;
    cfg.state_dim = 2;
    cfg.n_blocks = 1;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.window_size = 2;
    NestModel<float> m(cfg, Rng(17));
    auto& blk = m.blocks[0];
    // the residual sub-layers are identity exactly when their branches vanish
    for (auto& v : *blk.dw_w.buf) v = 0.0f;
    for (auto& v : *blk.dw_b.buf) v = 0.0f;
    for (auto& v : *blk.v_w.buf) v = 0.0f;
    for (auto& v : *blk.v_b.buf) v = 0.0f;
    for (auto& v : *blk.o_b.buf) v = 0.0f;
    Rng rng(19);
    auto z = random_tensor<float>({2, 3, 4, 4}, rng);
    auto out = m.local_mix(nullptr, z, blk);
    for (int64_t i = 0; i < z.numel(); ++i) CHECK(out[i] == z[i]);
}

TEST_CASE("windowed attention is window-local: zeroing one window leaves others unchanged") {
    ModelConfig cfg;
    cfg.channels = 3;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.window_size = 2;
    NestModel<double> m(cfg, Rng(23));
    Rng rng(29);
    auto x = random_tensor<double>({1, 3, 4, 4}, rng);
    auto x2 = x.clone();
    for (int c = 0; c < 3; ++c)  // zero the top-left window
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) x2[(c * 4 + i) * 4 + j] = 0.0;
    auto proj = m.attn_proj(m.blocks[0]);
    auto y1 = windowed_attention<double>(nullptr, x, 2, proj);
    auto y2 = windowed_attention<double>(nullptr, x2, 2, proj);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                if (i >= 2 || j >= 2) CHECK(y1[(c * 4 + i) * 4 + j] == y2[(c * 4 + i) * 4 + j]);
}

TEST_CASE("windowed attention on a constant field adds a per-channel constant") {
    ModelConfig cfg;
    cfg.channels = 3;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.window_size = 2;
    NestModel<double> m(cfg, Rng(31));
    Tensor<double> x({1, 3, 4, 4});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 16; ++i) x[c * 16 + i] = 0.3 * (c + 1);
    auto y = windowed_attention<double>(nullptr, x, 2, m.attn_proj(m.blocks[0]));
    for (int c = 0; c < 3; ++c)
        for (int i = 1; i < 16; ++i) CHECK(y[c * 16 + i] == doctest::Approx(y[c * 16]).epsilon(1e-12));
}

TEST_CASE("predict_params: delta floor, negative a_eff, stable decay range") {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.state_dim = 3;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.window_size = 2;
    cfg.low_rank = 2;
    NestModel<double> m(cfg, Rng(37));
    Rng rng(41);
    auto z = random_tensor<double>({2, 4, 4, 4}, rng, -3.0, 3.0);
    auto p = m.predict_params(nullptr, z, m.blocks[0]);
    for (int64_t i = 0; i < p.delta.numel(); ++i) {
        CHECK(p.delta[i] > kDeltaMin);
        CHECK(p.a_eff[i] < 0.0);
        const double dec = std::exp(p.a_eff[i] * p.delta[i]);
        CHECK(dec > 0.0);
        CHECK(dec < 1.0);
    }
}

TEST_CASE("predict_params: r=0 makes a_eff independent of the input") {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.state_dim = 2;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.window_size = 2;
    cfg.low_rank = 0;
    NestModel<double> m(cfg, Rng(43));
    Rng rng(47);
    auto z1 = random_tensor<double>({1, 4, 4, 4}, rng);
    auto z2 = random_tensor<double>({1, 4, 4, 4}, rng);
    auto p1 = m.predict_params(nullptr, z1, m.blocks[0]);
    auto p2 = m.predict_params(nullptr, z2, m.blocks[0]);
    for (int64_t i = 0; i < p1.a_eff.numel(); ++i) CHECK(p1.a_eff[i] == p2.a_eff[i]);
}

TEST_CASE("ssm_scan: homogeneous decay shrinks the state and matches exp(a*delta)^t") {
    Rng rng(53);
    const int B = 1, D = 2, Ds = 2, H = 2, W = 2;
    auto dl = random_tensor<double>({B, Ds, H, W}, rng, 0.2, 1.0);
    auto a = random_tensor<double>({B, Ds, H, W}, rng, -1.0, -0.2);
    auto bb = random_tensor<double>({B, Ds, H, W}, rng);
    auto cc = random_tensor<double>({B, Ds, H, W}, rng);
    Tensor<double> dsk({D});
    Tensor<double> x({B, D, H, W});  // zero input
    auto h = random_tensor<double>({B, D, Ds, H, W}, rng, 0.5, 1.0);
    double prev_norm = 2.0;
    Tensor<double> expected = h.clone();
    for (int t = 0; t < 4; ++t) {
        Tensor<double> h_last;
        ops::ssm_scan<double>(nullptr, x, 1, dl, a, bb, cc, dsk, h, &h_last);
        double norm = 0.0;
        for (int64_t i = 0; i < h_last.numel(); ++i) norm = std::max(norm, std::abs(h_last[i]));
        CHECK(norm < prev_norm);
        prev_norm = norm;
        // elementwise: h_t = exp(a*dl)^{t+1} * h_0
        for (int b = 0; b < B; ++b)
            for (int d = 0; d < D; ++d)
                for (int s = 0; s < Ds; ++s)
                    for (int64_t p = 0; p < H * W; ++p) {
                        const int64_t hi = (((b * D + d) * Ds) + s) * H * W + p;
                        const int64_t ci = (b * Ds + s) * H * W + p;
                        expected[hi] = expected[hi] * std::exp(a[ci] * dl[ci]);
                        CHECK(h_last[hi] == doctest::Approx(expected[hi]).epsilon(1e-12));
                    }
        h = h_last.clone();
    }
}

TEST_CASE("ssm_scan: T=1 closed form from h0=0") {
    Rng rng(59);
    const int B = 1, D = 2, Ds = 3, H = 2, W = 2;
    auto x = random_tensor<double>({B, D, H, W}, rng);
    auto dl = random_tensor<double>({B, Ds, H, W}, rng, 0.1, 1.0);
    auto a = random_tensor<double>({B, Ds, H, W}, rng, -1.0, -0.1);
    auto bb = random_tensor<double>({B, Ds, H, W}, rng);
    auto cc = random_tensor<double>({B, Ds, H, W}, rng);
    auto dsk = random_tensor<double>({D}, rng);
    Tensor<double> h0({B, D, Ds, H, W});
    auto y = ops::ssm_scan<double>(nullptr, x, 1, dl, a, bb, cc, dsk, h0);
    for (int d = 0; d < D; ++d)
        for (int64_t p = 0; p < H * W; ++p) {
            double want = dsk[d] * x[d * H * W + p];
            for (int s = 0; s < Ds; ++s) {
                const int64_t ci = s * H * W + p;
                want += (dl[ci] * x[d * H * W + p]) * bb[ci] * cc[ci];
            }
            CHECK(y[d * H * W + p] == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("ssm_scan: zero C collapses the readout to the skip path") {
    Rng rng(61);
    const int T = 3, B = 2, D = 2, Ds = 2, H = 2, W = 3;
    auto x = random_tensor<double>({T * B, D, H, W}, rng);
    auto dl = random_tensor<double>({T * B, Ds, H, W}, rng, 0.1, 1.0);
    auto a = random_tensor<double>({T * B, Ds, H, W}, rng, -1.0, -0.1);
    auto bb = random_tensor<double>({T * B, Ds, H, W}, rng);
    Tensor<double> cc({T * B, Ds, H, W});
    auto dsk = random_tensor<double>({D}, rng);
    Tensor<double> h0({B, D, Ds, H, W});
    auto y = ops::ssm_scan<double>(nullptr, x, T, dl, a, bb, cc, dsk, h0);
    for (int n = 0; n < T * B; ++n)
        for (int d = 0; d < D; ++d)
            for (int64_t p = 0; p < H * W; ++p)
                CHECK(y[(n * D + d) * H * W + p] ==
                      doctest::Approx(dsk[d] * x[(n * D + d) * H * W + p]).epsilon(1e-12));
}

TEST_CASE("ssm_scan: zero delta freezes the state at h0") {
    Rng rng(67);
    const int T = 2, B = 1, D = 1, Ds = 2, H = 2, W = 2;
    auto x = random_tensor<double>({T * B, D, H, W}, rng);
    Tensor<double> dl({T * B, Ds, H, W});
    auto a = random_tensor<double>({T * B, Ds, H, W}, rng, -1.0, -0.1);
    auto bb = random_tensor<double>({T * B, Ds, H, W}, rng);
    auto cc = random_tensor<double>({T * B, Ds, H, W}, rng);
    Tensor<double> dsk({D});
    auto h0 = random_tensor<double>({B, D, Ds, H, W}, rng);
    Tensor<double> h_last;
    ops::ssm_scan<double>(nullptr, x, T, dl, a, bb, cc, dsk, h0, &h_last);
    for (int64_t i = 0; i < h0.numel(); ++i) CHECK(h_last[i] == h0[i]);
}

TEST_CASE("ssm_scan equals the scalar reference loop") {
    Rng rng(71);
    SUBCASE("double precision: bit for bit") {
        for (int trial = 0; trial < 20; ++trial) {
            const int T = 1 + static_cast<int>(rng.below(4));
            const int B = 1 + static_cast<int>(rng.below(2));
            const int D = 1 + static_cast<int>(rng.below(3));
            const int Ds = 1 + static_cast<int>(rng.below(3));
            const int H = 1 + static_cast<int>(rng.below(3));
            const int W = 1 + static_cast<int>(rng.below(3));
            auto x = random_tensor<double>({T * B, D, H, W}, rng);
            auto dl = random_tensor<double>({T * B, Ds, H, W}, rng, 0.01, 1.5);
            auto a = random_tensor<double>({T * B, Ds, H, W}, rng, -2.0, -0.01);
            auto bb = random_tensor<double>({T * B, Ds, H, W}, rng);
            auto cc = random_tensor<double>({T * B, Ds, H, W}, rng);
            auto dsk = random_tensor<double>({D}, rng);
            auto h0 = random_tensor<double>({B, D, Ds, H, W}, rng);
            auto got = ops::ssm_scan<double>(nullptr, x, T, dl, a, bb, cc, dsk, h0);
            auto want = oracle::ssm_scan_reference<double>(x, T, dl, a, bb, cc, dsk, h0);
            for (int64_t i = 0; i < got.numel(); ++i) CHECK(got[i] == want[i]);
        }
    }
    SUBCASE("single precision: within 1e-6") {
        for (int trial = 0; trial < 20; ++trial) {
            const int T = 1 + static_cast<int>(rng.below(4));
            const int B = 1, D = 2, Ds = 2, H = 2, W = 2;
            auto x = random_tensor<float>({T * B, D, H, W}, rng);
            auto dl = random_tensor<float>({T * B, Ds, H, W}, rng, 0.01, 1.5);
            auto a = random_tensor<float>({T * B, Ds, H, W}, rng, -2.0, -0.01);
            auto bb = random_tensor<float>({T * B, Ds, H, W}, rng);
            auto cc = random_tensor<float>({T * B, Ds, H, W}, rng);
            auto dsk = random_tensor<float>({D}, rng);
            auto h0 = random_tensor<float>({B, D, Ds, H, W}, rng);
            auto got = ops::ssm_scan<float>(nullptr, x, T, dl, a, bb, cc, dsk, h0);
            auto want = oracle::ssm_scan_reference<float>(x, T, dl, a, bb, cc, dsk, h0);
            for (int64_t i = 0; i < got.numel(); ++i)
                CHECK(std::abs(got[i] - want[i]) < 1e-6f);
        }
    }
}

TEST_CASE("ssm_scan aborts with the step index on non-finite state") {
    const int T = 2, B = 1, D = 1, Ds = 1, H = 1, W = 1;
    Tensor<double> x = Tensor<double>::from({T, D, H, W}, {1e308, 1.0});
    Tensor<double> dl = Tensor<double>::full({T, Ds, H, W}, 1e308);
    Tensor<double> a = Tensor<double>::full({T, Ds, H, W}, -0.1);
    Tensor<double> bb = Tensor<double>::full({T, Ds, H, W}, 1e308);
    Tensor<double> cc = Tensor<double>::full({T, Ds, H, W}, 1.0);
    Tensor<double> dsk({D});
    Tensor<double> h0({B, D, Ds, H, W});
    CHECK_THROWS_AS(ops::ssm_scan<double>(nullptr, x, T, dl, a, bb, cc, dsk, h0), NumericError);
}

TEST_CASE("predict_patch: output shape is the patch for any T >= 1") {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.state_dim = 2;
    cfg.n_blocks = 1;
    cfg.patch_h = 4;
    cfg.patch_w = 6;
    cfg.window_size = 2;
    NestModel<float> m(cfg, Rng(73));
    Rng rng(79);
    for (int T = 1; T <= 4; ++T) {
        auto w = random_tensor<float>({T, 4, 6}, rng);
        auto y = m.predict_patch(w);
        CHECK(y.shape == std::vector<int>{4, 6});
        CHECK(y.finite());
    }
}

TEST_CASE("predict_patch: fixed seed gives bit-identical outputs across fresh builds") {
    ModelConfig cfg;
    cfg.channels = 6;
    cfg.state_dim = 2;
    cfg.n_blocks = 2;
    cfg.patch_h = cfg.patch_w = 4;
    cfg.window_size = 2;
    auto run = [&]() {
        NestModel<float> m(cfg, Rng(101));
        Rng rng(103);
        auto w = random_tensor<float>({3, 4, 4}, rng);
        return m.predict_patch(w);
    };
    auto y1 = run();
    auto y2 = run();
    for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("predict_patch: locality under r=0 (no global modulation)") {
    ModelConfig cfg;
    cfg.channels = 4;
    cfg.state_dim = 2;
    cfg.n_blocks = 1;
    cfg.patch_h = cfg.patch_w = 8;
    cfg.window_size = 2;
    cfg.low_rank = 0;
    cfg.use_memory = false;
    NestModel<float> m(cfg, Rng(107));
    Rng rng(109);
    m.head_w = random_tensor<float>({1, cfg.channels, 1, 1}, rng);  // head is zero-initialized
    auto w = random_tensor<float>({3, 8, 8}, rng);
    auto y = m.predict_patch(w);
    // composed receptive field of output (0,0): stem +-1, depthwise +-1,
    // one 2x2 window expansion -> nothing past row/col 3 can matter
    auto w2 = w.clone();
    w2[(2 * 8 + 6) * 8 + 6] += 10.0f;  // frame 2, pixel (6,6)
    auto y2 = m.predict_patch(w2);
    CHECK(y2[0] == y[0]);
    CHECK(y2[1] == y[1]);
    CHECK(y2[8] == y[8]);
    // and the perturbation did change something nearby
    bool changed = false;
    for (int64_t i = 0; i < y.numel(); ++i) changed = changed || (y[i] != y2[i]);
    CHECK(changed);
}
