#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "nests6/eval.hpp"
#include "nests6/train.hpp"
#include "oracles.hpp"

using namespace nests6;
using oracle::random_tensor;

namespace {

GridSeries diurnal_series(int n, int h, int w, uint64_t seed) {
    SynthConfig cfg;
    cfg.H = h;
    cfg.W = w;
    cfg.N = n;
    cfg.n_hotspots = 3;
    cfg.noise_std = 0.2;
    cfg.seed = seed;
    return synth_generate(cfg);
}

ModelConfig small_config() {
    ModelConfig mc;
    mc.channels = 6;
    mc.state_dim = 2;
    mc.n_blocks = 1;
    mc.patch_h = mc.patch_w = 4;
    mc.window_size = 2;
    mc.low_rank = 0;
    mc.t_window = 4;
    return mc;
}

}  // namespace

TEST_CASE("mae_rmse: perfect predictions give zeros") {
    Rng rng(1);
    auto p = random_tensor<float>({3, 3}, rng);
    Normalizer norm;
    norm.mean = 5;
    norm.std = 2;
    auto r = mae_rmse(p, p, norm);
    CHECK(r.mae == 0.0);
    CHECK(r.rmse == 0.0);
    CHECK(r.n_samples == 9);
}

TEST_CASE("mae_rmse: raw errors [3,-4] give mae 3.5 and rmse sqrt(12.5)") {
    Normalizer norm;
    norm.mean = 10;
    norm.std = 2;  // raw error 3 -> normalized 1.5, raw -4 -> -2
    Tensor<float> pred = Tensor<float>::from({2}, {1.5f, 0.0f});
    Tensor<float> tgt = Tensor<float>::from({2}, {0.0f, 2.0f});
    auto r = mae_rmse(pred, tgt, norm);
    CHECK(r.mae == doctest::Approx(3.5).epsilon(1e-6));
    CHECK(r.rmse == doctest::Approx(std::sqrt(12.5)).epsilon(1e-6));
}

TEST_CASE("mae_rmse: random batch matches a scalar loop oracle; rmse >= mae") {
    Rng rng(3);
    auto p = random_tensor<float>({4, 7}, rng);
    auto t = random_tensor<float>({4, 7}, rng);
    Normalizer norm;
    norm.mean = 2.5;
    norm.std = 3.0;
    auto r = mae_rmse(p, t, norm);
    double abs_sum = 0, sq = 0;
    for (int64_t i = 0; i < p.numel(); ++i) {
        const double d = (static_cast<double>(p[i]) * norm.std + norm.mean) -
                         (static_cast<double>(t[i]) * norm.std + norm.mean);
        abs_sum += std::abs(d);
        sq += d * d;
    }
    CHECK(r.mae == doctest::Approx(abs_sum / p.numel()).epsilon(1e-6));
    CHECK(r.rmse == doctest::Approx(std::sqrt(sq / p.numel())).epsilon(1e-6));
    CHECK(r.rmse >= r.mae);
    CHECK_THROWS_AS(mae_rmse(Tensor<float>({0}), Tensor<float>({0}), norm), DataError);
}

TEST_CASE("evaluate: rollout h=1 equals single-step evaluation bit for bit") {
    auto series = diurnal_series(60, 8, 8, 5);
    auto mc = small_config();
    NestModel<float> model(mc, Rng(7));
    Split split = chronological_split(series.n(), {0.7, 0.1});
    auto norm = Normalizer::fit(series.frames.ptr(),
                                static_cast<int64_t>(split.train_end) * series.h() * series.w());
    const int H = 6;
    EvalOptions roll;
    roll.first_target = split.val_end;
    roll.last_target = series.n() - 1;
    roll.horizon = H;
    auto r6 = evaluate(model, series, norm, roll);
    REQUIRE(static_cast<int>(r6.per_horizon.size()) == H);

    EvalOptions single;
    single.first_target = roll.first_target;
    single.last_target = roll.last_target - (H - 1);  // same anchor set
    single.horizon = 1;
    auto r1 = evaluate(model, series, norm, single);

    CHECK(r1.per_horizon[0].mae == r6.per_horizon[0].mae);
    CHECK(r1.per_horizon[0].rmse == r6.per_horizon[0].rmse);
    CHECK(r1.per_horizon[0].n_samples == r6.per_horizon[0].n_samples);
    CHECK(r6.rollout_write_calls == 0);

    // deltas are exactly the differences of reported quantities
    CHECK(r6.delta_mae == r6.per_horizon[H - 1].mae - r6.per_horizon[0].mae);
    CHECK(r6.delta_rmse == r6.per_horizon[H - 1].rmse - r6.per_horizon[0].rmse);
    for (const auto& rep : r6.per_horizon) {
        CHECK(std::isfinite(rep.mae));
        CHECK(std::isfinite(rep.rmse));
        CHECK(rep.rmse >= rep.mae);
    }
}

TEST_CASE("evaluate: workers > 1 reproduce the single-worker result bit for bit") {
    auto series = diurnal_series(50, 8, 8, 11);
    auto mc = small_config();
    NestModel<float> model(mc, Rng(13));
    auto norm = Normalizer::fit(series.frames.ptr(), series.frames.numel());
    EvalOptions o1;
    o1.first_target = 20;
    o1.last_target = 45;
    o1.horizon = 3;
    auto a = evaluate(model, series, norm, o1);
    o1.workers = 4;
    auto b = evaluate(model, series, norm, o1);
    for (int h = 0; h < 3; ++h) {
        CHECK(a.per_horizon[h].mae == b.per_horizon[h].mae);
        CHECK(a.per_horizon[h].rmse == b.per_horizon[h].rmse);
    }
}

TEST_CASE("persistence baseline accumulates error on diurnal data") {
    auto series = diurnal_series(200, 8, 8, 17);
    Split split = chronological_split(series.n(), {0.7, 0.1});
    auto norm = Normalizer::fit(series.frames.ptr(),
                                static_cast<int64_t>(split.train_end) * series.h() * series.w());
    auto res = persistence_eval(series, norm, split.val_end, series.n() - 1, 6);
    CHECK(res.delta_mae > 0.0);
    CHECK(res.per_horizon[0].mae > 0.0);
}

TEST_CASE("evaluate: per-pixel map aggregation identity") {
    auto series = diurnal_series(40, 8, 8, 19);
    auto mc = small_config();
    NestModel<float> model(mc, Rng(23));
    auto norm = Normalizer::fit(series.frames.ptr(), series.frames.numel());
    EvalOptions opts;
    opts.first_target = 10;
    opts.last_target = 39;
    opts.horizon = 1;
    opts.collect_map = true;
    auto res = evaluate(model, series, norm, opts);
    REQUIRE(res.rmse_map.numel() == 64);
    // mean over the map of squared values equals the global mse
    double map_ms = 0;
    for (int64_t i = 0; i < res.rmse_map.numel(); ++i)
        map_ms += static_cast<double>(res.rmse_map[i]) * res.rmse_map[i];
    map_ms /= static_cast<double>(res.rmse_map.numel());
    const double global_mse = res.per_horizon[0].rmse * res.per_horizon[0].rmse;
    CHECK(map_ms == doctest::Approx(global_mse).epsilon(1e-6));
}

TEST_CASE("evaluate: memory-off equals an architecturally memory-free model bit for bit") {
    auto series = diurnal_series(40, 8, 8, 29);
    auto mc = small_config();
    mc.use_memory = true;
    NestModel<float> with_mem(mc, Rng(31));
    ModelConfig mc2 = mc;
    mc2.use_memory = false;
    NestModel<float> without(mc2, Rng(32));
    {
        std::map<std::string, Tensor<float>*> src;
        for (auto& [n, p] : with_mem.named_params()) src[n] = p;
        for (auto& [n, p] : without.named_params()) *p = src.at(n)->clone();
    }
    auto norm = Normalizer::fit(series.frames.ptr(), series.frames.numel());
    EvalOptions opts;
    opts.first_target = 10;
    opts.last_target = 35;
    opts.horizon = 2;
    opts.memory_enabled = false;
    auto a = evaluate(with_mem, series, norm, opts);
    opts.memory_enabled = true;  // no-op for a memory-free architecture
    auto b = evaluate(without, series, norm, opts);
    for (int h = 0; h < 2; ++h) {
        CHECK(a.per_horizon[h].mae == b.per_horizon[h].mae);
        CHECK(a.per_horizon[h].rmse == b.per_horizon[h].rmse);
    }
}

TEST_CASE("count_macs: 1x1 conv closed form and tiling/T linearity") {
    ModelConfig mc;
    mc.channels = 3;
    mc.state_dim = 2;
    mc.n_blocks = 2;
    mc.patch_h = mc.patch_w = 4;
    mc.window_size = 2;
    mc.low_rank = 0;
    mc.t_window = 6;
    auto m1 = count_macs(mc, 8, 8);
    // attention projections row: 4 * D^2 * Hp*Wp
    for (const auto& row : m1.rows)
        if (row.layer == "block0.attn.proj")
            CHECK(row.per_patch_step == 4 * 3 * 3 * 16);
    // doubling the grid (same patch) gives exactly 4x
    auto m2 = count_macs(mc, 16, 16);
    CHECK(m2.total == 4 * m1.total);
    CHECK(m2.per_patch_step_total == m1.per_patch_step_total);
    // halving T halves the total exactly
    ModelConfig mc3 = mc;
    mc3.t_window = 3;
    auto m3 = count_macs(mc3, 8, 8);
    CHECK(m1.total == 2 * m3.total);
}

TEST_CASE("count_macs: hand-derived ledger for the tiny config") {
    // D=2, Ds=1, 2x2 patch, T=1, one block, window 2, r=0, memory on.
    // Hand count per patch per step:
    //   stem        : D*2*9*HW      = 2*2*9*4  = 144
    //   memory.gate : D*D*HW + D*HW = 16 + 8   = 24
    //   dwconv      : D*9*HW        = 2*9*4    = 72
    //   attn.proj   : 4*D*D*HW      = 4*4*4    = 64
    //   attn.mix    : 2*HW*ws^2*D   = 2*4*4*2  = 64
    //   params      : 3*Ds*D*HW     = 3*1*2*4  = 24
    //   scan        : 5*D*Ds*HW     = 5*2*1*4  = 40
    //   head        : D*HW          = 2*4      = 8
    //   total per patch-step                   = 440
    ModelConfig mc;
    mc.channels = 2;
    mc.state_dim = 1;
    mc.n_blocks = 1;
    mc.patch_h = mc.patch_w = 2;
    mc.window_size = 2;
    mc.low_rank = 0;
    mc.t_window = 1;
    mc.use_memory = true;
    auto m = count_macs(mc, 2, 2);
    REQUIRE(m.n_patches == 1);
    auto row = [&](const std::string& name) {
        for (const auto& r : m.rows)
            if (r.layer == name) return r.per_patch_step;
        FAIL("missing row ", name);
        return int64_t(-1);
    };
    CHECK(row("stem") == 144);
    CHECK(row("memory.gate") == 24);
    CHECK(row("block0.dwconv") == 72);
    CHECK(row("block0.attn.proj") == 64);
    CHECK(row("block0.attn.mix") == 64);
    CHECK(row("block0.params") == 24);
    CHECK(row("block0.scan") == 40);
    CHECK(row("head") == 8);
    CHECK(m.per_patch_step_total == 440);
    CHECK(m.total == 440);  // T=1, one patch
    // the write network is reported but not part of the per-step total:
    // phi1 D*(D+1)*HW + phi2 D*D*HW + blend 2*D*HW = 24+16+16 = 56
    CHECK(m.slow_write_per_window == 56);

    // 4 patches on a 4x4 grid, T=6: exact linearity
    ModelConfig mc6 = mc;
    mc6.t_window = 6;
    auto m6 = count_macs(mc6, 4, 4);
    CHECK(m6.total == 440 * 6 * 4);
}

TEST_CASE("evaluate never writes parameters") {
    auto series = diurnal_series(30, 4, 4, 37);
    ModelConfig mc = small_config();
    mc.patch_h = mc.patch_w = 4;
    NestModel<float> model(mc, Rng(41));
    auto norm = Normalizer::fit(series.frames.ptr(), series.frames.numel());
    const auto before = model.param_checksum();
    EvalOptions opts;
    opts.first_target = 8;
    opts.last_target = 29;
    opts.horizon = 4;
    evaluate(model, series, norm, opts);
    CHECK(model.param_checksum() == before);
}
