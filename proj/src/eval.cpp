#include "nests6/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "nests6/error.hpp"

namespace nests6 {

MetricReport MetricAccum::report() const {
    MetricReport r;
    if (n > 0) {
        r.mae = abs_sum / static_cast<double>(n);
        r.rmse = std::sqrt(sq_sum / static_cast<double>(n));
        // power-mean inequality, modulo rounding
        if (r.rmse < r.mae * (1.0 - 1e-12))
            throw NumericError("metric report: rmse < mae");
    }
    r.n_samples = n;
    return r;
}

MetricReport mae_rmse(const Tensor<float>& preds, const Tensor<float>& targets,
                      const Normalizer& norm) {
    check_same_shape(preds, targets, "mae_rmse");
    if (preds.numel() == 0) throw DataError("mae_rmse: empty input");
    MetricAccum acc;
    for (int64_t i = 0; i < preds.numel(); ++i)
        acc.add(static_cast<double>(norm.invert(preds[i])) - static_cast<double>(norm.invert(targets[i])));
    return acc.report();
}

namespace {

struct StreamAccum {
    std::vector<MetricAccum> per_horizon;
    std::vector<double> map_sq;  // per-cell squared raw error (h=1), patch-local
    int64_t map_n = 0;
    int64_t rollout_writes = 0;
};

// One patch location's chronological sweep. Pure function of its inputs, so
// streams can run on separate workers.
StreamAccum run_stream(const NestModel<float>& model, const Tensor<float>& drift_frames,
                       const Tensor<float>& clean_frames, const Normalizer& norm, int patch_row,
                       int patch_col, const EvalOptions& opts) {
    const ModelConfig& cfg = model.cfg;
    const int T = cfg.t_window, Hp = cfg.patch_h, Wp = cfg.patch_w;
    const int W = clean_frames.dim(2);
    const int anchor_max = opts.last_target - (opts.horizon - 1);
    StreamAccum acc;
    acc.per_horizon.resize(static_cast<size_t>(opts.horizon));
    if (opts.collect_map) acc.map_sq.assign(static_cast<size_t>(Hp) * Wp, 0.0);

    const bool with_memory = opts.memory_enabled && cfg.use_memory;
    MemoryState<float> mem = MemoryState<float>::zeros(1, cfg.channels, Hp, Wp);
    Tensor<float> prev_pred, prev_target;

    auto patch_of = [&](const Tensor<float>& frames, int t) {
        Tensor<float> p({1, 1, Hp, Wp});
        const float* f = frames.ptr() + static_cast<int64_t>(t) * frames.dim(1) * W;
        for (int i = 0; i < Hp; ++i)
            for (int j = 0; j < Wp; ++j) p[i * Wp + j] = f[(patch_row + i) * W + patch_col + j];
        return p;
    };

    // sliding input window [T,1,Hp,Wp] starting at the first anchor
    auto window_at = [&](int target_frame) {
        Tensor<float> x({T, 1, Hp, Wp});
        for (int t = 0; t < T; ++t) {
            auto p = patch_of(drift_frames, target_frame - T + t);
            std::copy_n(p.ptr(), static_cast<int64_t>(Hp) * Wp,
                        x.ptr() + static_cast<int64_t>(t) * Hp * Wp);
        }
        return x;
    };

    for (int tf = opts.first_target; tf <= opts.last_target; ++tf) {
        Tensor<float> x = window_at(tf);
        Surprise<float> s;
        if (prev_pred.numel() > 0)
            s = compute_surprise(prev_pred, prev_target);
        else
            s.s = Tensor<float>({1, 1, Hp, Wp});
        auto out = model.forward(nullptr, x, with_memory ? &mem : nullptr, &s);
        if (with_memory && out.m_next.numel() > 0) mem.m = out.m_next;

        const Tensor<float> target = patch_of(clean_frames, tf);
        if (tf <= anchor_max) {
            auto& h1 = acc.per_horizon[0];
            for (int64_t i = 0; i < target.numel(); ++i) {
                const double err = static_cast<double>(norm.invert(out.y_hat[i])) -
                                   static_cast<double>(norm.invert(target[i]));
                h1.add(err);
                if (opts.collect_map) acc.map_sq[static_cast<size_t>(i)] += err * err;
            }
            if (opts.collect_map) acc.map_n += 1;

            if (opts.horizon > 1) {
                MemoryState<float> roll_mem;
                if (with_memory) {
                    roll_mem.m = mem.m.clone();
                    roll_mem.mode = MemoryMode::free_running;
                }
                const int64_t writes_before = roll_mem.write_count;
                Tensor<float> buf = x.clone();
                Tensor<float> cur = out.y_hat.detached();
                const int64_t pn = static_cast<int64_t>(Hp) * Wp;
                for (int h = 2; h <= opts.horizon; ++h) {
                    // slide: drop the oldest frame, append the prediction
                    std::copy(buf.ptr() + pn, buf.ptr() + static_cast<int64_t>(T) * pn, buf.ptr());
                    std::copy_n(cur.ptr(), pn, buf.ptr() + static_cast<int64_t>(T - 1) * pn);
                    if (with_memory) memory_decay(roll_mem, model.slow);
                    auto roll_out =
                        model.forward(nullptr, buf, with_memory ? &roll_mem : nullptr, nullptr);
                    const Tensor<float> truth = patch_of(clean_frames, tf + h - 1);
                    auto& acc_h = acc.per_horizon[static_cast<size_t>(h - 1)];
                    for (int64_t i = 0; i < truth.numel(); ++i)
                        acc_h.add(static_cast<double>(norm.invert(roll_out.y_hat[i])) -
                                  static_cast<double>(norm.invert(truth[i])));
                    cur = roll_out.y_hat.detached();
                }
                acc.rollout_writes += roll_mem.write_count - writes_before;
            }
        }
        prev_pred = out.y_hat.detached();
        prev_target = target;
    }
    return acc;
}

}  // namespace

EvalResult evaluate(NestModel<float>& model, const GridSeries& series, const Normalizer& norm,
                    const EvalOptions& opts) {
    const ModelConfig& cfg = model.cfg;
    const int T = cfg.t_window;
    if (series.h() % cfg.patch_h != 0 || series.w() % cfg.patch_w != 0)
        throw DataError("evaluate: patch dims must divide the grid");
    if (opts.first_target < T)
        throw DataError("evaluate: first target " + std::to_string(opts.first_target) +
                        " needs " + std::to_string(T) + " history frames");
    if (opts.horizon < 1) throw ConfigError("evaluate: horizon must be >= 1");
    if (opts.last_target >= series.n() || opts.last_target < opts.first_target)
        throw DataError("evaluate: target range out of bounds");
    if (opts.last_target - (opts.horizon - 1) < opts.first_target)
        throw DataError("evaluate: insufficient truth frames for horizon " +
                        std::to_string(opts.horizon));

    const uint64_t checksum_before = model.param_checksum();

    // normalized clean and drifted (input-side) frame stacks
    Tensor<float> clean(series.frames.shape);
    for (int64_t i = 0; i < clean.numel(); ++i) clean[i] = norm.apply(series.frames[i]);
    Tensor<float> drifted = drift_apply(clean, opts.drift);

    const int ny = series.h() / cfg.patch_h, nx = series.w() / cfg.patch_w;
    const int n_loc = ny * nx;
    std::vector<StreamAccum> per_loc(static_cast<size_t>(n_loc));

    auto work = [&](int loc) {
        const int pr = (loc / nx) * cfg.patch_h;
        const int pc = (loc % nx) * cfg.patch_w;
        per_loc[static_cast<size_t>(loc)] =
            run_stream(model, drifted, clean, norm, pr, pc, opts);
    };
    const int workers = std::max(1, opts.workers);
    if (workers == 1 || n_loc == 1) {
        for (int loc = 0; loc < n_loc; ++loc) work(loc);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        for (int w = 0; w < std::min(workers, n_loc); ++w)
            pool.emplace_back([&] {
                for (int loc = next.fetch_add(1); loc < n_loc; loc = next.fetch_add(1)) work(loc);
            });
        for (auto& th : pool) th.join();
    }

    EvalResult res;
    res.per_horizon.assign(static_cast<size_t>(opts.horizon), MetricReport{});
    std::vector<MetricAccum> merged(static_cast<size_t>(opts.horizon));
    for (int loc = 0; loc < n_loc; ++loc) {
        for (int h = 0; h < opts.horizon; ++h)
            merged[static_cast<size_t>(h)].merge(per_loc[static_cast<size_t>(loc)].per_horizon[static_cast<size_t>(h)]);
        res.rollout_write_calls += per_loc[static_cast<size_t>(loc)].rollout_writes;
    }
    for (int h = 0; h < opts.horizon; ++h) {
        res.per_horizon[static_cast<size_t>(h)] = merged[static_cast<size_t>(h)].report();
        res.per_horizon[static_cast<size_t>(h)].horizon = h + 1;
        res.per_horizon[static_cast<size_t>(h)].drift = opts.drift.kind;
        res.per_horizon[static_cast<size_t>(h)].memory_enabled = opts.memory_enabled;
    }
    res.delta_mae = res.per_horizon.back().mae - res.per_horizon.front().mae;
    res.delta_rmse = res.per_horizon.back().rmse - res.per_horizon.front().rmse;

    if (opts.collect_map) {
        res.rmse_map = Tensor<float>({series.h(), series.w()});
        for (int loc = 0; loc < n_loc; ++loc) {
            const auto& sa = per_loc[static_cast<size_t>(loc)];
            const int pr = (loc / nx) * cfg.patch_h;
            const int pc = (loc % nx) * cfg.patch_w;
            for (int i = 0; i < cfg.patch_h; ++i)
                for (int j = 0; j < cfg.patch_w; ++j) {
                    const double ms = sa.map_n > 0
                                          ? sa.map_sq[static_cast<size_t>(i) * cfg.patch_w + j] /
                                                static_cast<double>(sa.map_n)
                                          : 0.0;
                    res.rmse_map[(pr + i) * static_cast<int64_t>(series.w()) + pc + j] =
                        static_cast<float>(std::sqrt(ms));
                }
        }
    }

    if (model.param_checksum() != checksum_before)
        throw NumericError("evaluate: parameter checksum changed during evaluation");
    return res;
}

EvalResult persistence_eval(const GridSeries& series, const Normalizer& norm, int first_target,
                            int last_target, int horizon, const DriftSpec& drift) {
    Tensor<float> clean(series.frames.shape);
    for (int64_t i = 0; i < clean.numel(); ++i) clean[i] = norm.apply(series.frames[i]);
    Tensor<float> drifted = drift_apply(clean, drift);
    const int H = series.h(), W = series.w();
    const int64_t hw = static_cast<int64_t>(H) * W;
    const int anchor_max = last_target - (horizon - 1);
    std::vector<MetricAccum> acc(static_cast<size_t>(horizon));
    for (int tf = first_target; tf <= anchor_max; ++tf) {
        // persistence predicts the last observed (possibly drifted) frame forever
        const float* last_obs = drifted.ptr() + static_cast<int64_t>(tf - 1) * hw;
        for (int h = 1; h <= horizon; ++h) {
            const float* truth = clean.ptr() + static_cast<int64_t>(tf + h - 1) * hw;
            for (int64_t i = 0; i < hw; ++i)
                acc[static_cast<size_t>(h - 1)].add(
                    static_cast<double>(norm.invert(last_obs[i])) -
                    static_cast<double>(norm.invert(truth[i])));
        }
    }
    EvalResult res;
    for (int h = 1; h <= horizon; ++h) {
        MetricReport r = acc[static_cast<size_t>(h - 1)].report();
        r.horizon = h;
        r.drift = drift.kind;
        res.per_horizon.push_back(r);
    }
    res.delta_mae = res.per_horizon.back().mae - res.per_horizon.front().mae;
    res.delta_rmse = res.per_horizon.back().rmse - res.per_horizon.front().rmse;
    return res;
}

MacCount count_macs(const ModelConfig& cfg, int grid_h, int grid_w) {
    cfg.validate();
    if (grid_h % cfg.patch_h != 0 || grid_w % cfg.patch_w != 0)
        throw ConfigError("count_macs: patch dims must divide the grid");
    const int64_t D = cfg.channels, Ds = cfg.state_dim, r = cfg.low_rank;
    const int64_t hp = cfg.patch_h, wp = cfg.patch_w, hw = hp * wp;
    const int64_t ws = cfg.resolved_window();
    MacCount mc;
    mc.n_patches = static_cast<int>((grid_h / cfg.patch_h) * (grid_w / cfg.patch_w));
    mc.t_window = cfg.t_window;

    auto row = [&](const std::string& name, int64_t macs) {
        mc.rows.push_back({name, macs});
        mc.per_patch_step_total += macs;
    };

    // stem conv 3x3, 2 -> D
    row("stem", D * 2 * 9 * hw);
    if (cfg.use_memory) {
        // gate conv D -> D plus the elementwise injection product
        row("memory.gate", D * D * hw + D * hw);
        mc.transcendental_per_patch_step += D * hw;  // gate sigmoid
        // once-per-window write network, excluded from the per-step total
        mc.slow_write_per_window = D * (D + 1) * hw + D * D * hw + 2 * D * hw;
    }
    for (int b = 0; b < cfg.n_blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        row(p + "dwconv", D * 9 * hw);
        row(p + "attn.proj", 4 * D * D * hw);
        // per window 2*(ws^2)^2*D for scores and mixing; nW = hw/ws^2
        row(p + "attn.mix", 2 * hw * ws * ws * D);
        int64_t par = 3 * Ds * D * hw;
        if (r > 0) par += D * r + r * Ds;  // pooled low-rank modulation
        row(p + "params", par);
        // per-element ledger of the scan update, decay product and readout sum
        row(p + "scan", 5 * D * Ds * hw);
        mc.transcendental_per_patch_step += Ds * hw        // delta softplus
                                            + Ds * hw      // scan decay exp
                                            + Ds           // a_base exp
                                            + hw * ws * ws // softmax exp
                                            + 2 * hw * D;  // layer-norm rsqrt amortized + silu
    }
    row("head", D * hw);
    mc.transcendental_per_patch_step += D * hw;  // stem silu
    mc.total = mc.per_patch_step_total * mc.t_window * mc.n_patches;
    return mc;
}

}  // namespace nests6
