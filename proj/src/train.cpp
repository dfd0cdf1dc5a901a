#include "nests6/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "nests6/error.hpp"

namespace nests6 {

namespace {

struct Stream {
    MemoryState<float> mem;
    Tensor<float> prev_pred;
    Tensor<float> prev_target;
};

struct SampleGrads {
    std::vector<Tensor<float>> grads;  // in named-param order
    Tensor<float> pred;
    Tensor<float> m_next;
    double loss = 0.0;
    bool ok = false;
};

// Forward/backward for one (target frame, location) sample on a private tape.
SampleGrads sample_step(NestModel<float>& worker_model, const GridSeries& series,
                        const Normalizer& norm, const WindowSample& ws, const TrainConfig& cfg,
                        int t_window, Stream& stream) {
    const ModelConfig& mc = worker_model.cfg;
    SampleGrads out;
    Tensor<float> x3 = extract_window(series, norm, ws, t_window, mc.patch_h, mc.patch_w);
    Tensor<float> x = x3.detached();
    x.shape = {t_window, 1, mc.patch_h, mc.patch_w};
    Tensor<float> y3 = extract_target(series, norm, ws, mc.patch_h, mc.patch_w);
    Tensor<float> y = y3.detached();
    y.shape = {1, 1, mc.patch_h, mc.patch_w};

    Tape<float> tape;
    worker_model.watch_params(tape);
    Surprise<float> s;
    if (stream.prev_pred.numel() > 0)
        s = compute_surprise(stream.prev_pred, stream.prev_target);
    else
        s.s = Tensor<float>({1, 1, mc.patch_h, mc.patch_w});
    auto fwd = worker_model.forward(&tape, x, mc.use_memory ? &stream.mem : nullptr, &s);
    auto loss = prediction_loss(&tape, fwd.y_hat, y, cfg.smooth_l1_beta, cfg.laplacian_weight);
    out.loss = static_cast<double>(loss[0]);
    out.pred = fwd.y_hat.detached();
    out.m_next = fwd.m_next;
    if (!std::isfinite(out.loss)) return out;
    tape.backward(loss);
    auto named = worker_model.named_params();
    out.grads.reserve(named.size());
    for (auto& [name, p] : named) out.grads.push_back(tape.grad(*p));
    out.ok = true;
    return out;
}

double validation_mae(NestModel<float>& model, const GridSeries& series, const Normalizer& norm,
                      const Split& split, int workers, double* rmse_out) {
    EvalOptions opts;
    opts.first_target = std::max(model.cfg.t_window, split.train_end);
    opts.last_target = split.val_end - 1;
    opts.horizon = 1;
    opts.workers = workers;
    if (opts.last_target < opts.first_target) {
        if (rmse_out) *rmse_out = 0.0;
        return 0.0;
    }
    auto res = evaluate(model, series, norm, opts);
    if (rmse_out) *rmse_out = res.per_horizon[0].rmse;
    return res.per_horizon[0].mae;
}

}  // namespace

TrainResult train_model(NestModel<float>& model, const GridSeries& series, const Normalizer& norm,
                        const TrainConfig& cfg) {
    cfg.validate();
    const ModelConfig& mc = model.cfg;
    const int T = mc.t_window;
    const Split split = chronological_split(series.n(), cfg.split);

    auto named = model.named_params();
    std::vector<AdamState<float>> adam;
    adam.reserve(named.size());
    for (auto& [name, p] : named) adam.push_back(AdamState<float>::make(*p, cfg.lr));

    const int ny = series.h() / mc.patch_h, nx = series.w() / mc.patch_w;
    const int n_loc = ny * nx;

    TrainResult result;
    result.split = split;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<Tensor<float>> best_params;
    int since_best = 0;
    int64_t global_step = 0;

    // worker copies share parameter buffers with the master, so optimizer
    // updates are visible everywhere; only tape metadata is private
    const int workers = std::max(1, cfg.workers);
    std::vector<NestModel<float>> worker_models(static_cast<size_t>(workers), model);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<Stream> streams(static_cast<size_t>(n_loc));
        for (auto& st : streams)
            st.mem = MemoryState<float>::zeros(1, mc.channels, mc.patch_h, mc.patch_w);

        double loss_sum = 0.0;
        int64_t loss_n = 0;
        int64_t skipped = 0;
        int64_t steps_this_epoch = 0;

        for (int tf = T; tf < split.train_end; ++tf) {
            for (int chunk = 0; chunk < n_loc; chunk += cfg.batch_size) {
                const int chunk_n = std::min(cfg.batch_size, n_loc - chunk);
                std::vector<SampleGrads> results(static_cast<size_t>(chunk_n));
                auto run_one = [&](int slot, int widx) {
                    const int loc = chunk + slot;
                    WindowSample ws{tf, (loc / nx) * mc.patch_h, (loc % nx) * mc.patch_w};
                    results[static_cast<size_t>(slot)] =
                        sample_step(worker_models[static_cast<size_t>(widx)], series, norm, ws,
                                    cfg, T, streams[static_cast<size_t>(loc)]);
                };
                if (workers == 1 || chunk_n == 1) {
                    for (int slot = 0; slot < chunk_n; ++slot) run_one(slot, 0);
                } else {
                    std::atomic<int> next{0};
                    std::vector<std::thread> pool;
                    const int nw = std::min(workers, chunk_n);
                    for (int w = 0; w < nw; ++w)
                        pool.emplace_back([&, w] {
                            for (int slot = next.fetch_add(1); slot < chunk_n;
                                 slot = next.fetch_add(1))
                                run_one(slot, w);
                        });
                    for (auto& th : pool) th.join();
                }

                // commit streams in slot order, then reduce gradients in slot order
                int n_ok = 0;
                double chunk_loss = 0.0;
                for (int slot = 0; slot < chunk_n; ++slot) {
                    auto& r = results[static_cast<size_t>(slot)];
                    const int loc = chunk + slot;
                    if (!r.ok) continue;
                    ++n_ok;
                    chunk_loss += r.loss;
                    auto& st = streams[static_cast<size_t>(loc)];
                    st.prev_pred = r.pred;
                    WindowSample ws{tf, (loc / nx) * mc.patch_h, (loc % nx) * mc.patch_w};
                    Tensor<float> y3 = extract_target(series, norm, ws, mc.patch_h, mc.patch_w);
                    st.prev_target = y3.detached();
                    st.prev_target.shape = {1, 1, mc.patch_h, mc.patch_w};
                    if (mc.use_memory && r.m_next.numel() > 0) st.mem.m = r.m_next;
                }
                ++steps_this_epoch;
                if (n_ok == 0) {
                    ++skipped;
                    continue;
                }

                std::vector<Tensor<float>> grads;
                grads.reserve(named.size());
                for (size_t pi = 0; pi < named.size(); ++pi) {
                    Tensor<float> g(named[pi].second->shape);
                    for (int slot = 0; slot < chunk_n; ++slot) {
                        auto& r = results[static_cast<size_t>(slot)];
                        if (!r.ok) continue;
                        ops::axpy_into(std::span<float>(g.ptr(), static_cast<size_t>(g.numel())),
                                       r.grads[pi].ptr(), g.numel(),
                                       1.0f / static_cast<float>(n_ok));
                    }
                    grads.push_back(std::move(g));
                }

                double norm_sq = 0.0;
                for (const auto& g : grads)
                    for (int64_t i = 0; i < g.numel(); ++i)
                        norm_sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
                const double gnorm = std::sqrt(norm_sq);
                if (!std::isfinite(gnorm)) {
                    ++skipped;
                    continue;
                }
                if (gnorm > cfg.grad_clip_norm && gnorm > 0) {
                    const float scale = static_cast<float>(cfg.grad_clip_norm / gnorm);
                    for (auto& g : grads)
                        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
                }
                for (size_t pi = 0; pi < named.size(); ++pi)
                    adam_update(*named[pi].second, grads[pi], adam[pi]);
                ++global_step;
                loss_sum += chunk_loss / n_ok;
                ++loss_n;
            }
        }

        EpochLog log;
        log.epoch = epoch;
        log.step = global_step;
        log.train_loss = loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : 0.0;
        log.lr = cfg.lr;
        log.skipped_steps = skipped;
        log.flagged = steps_this_epoch > 0 &&
                      static_cast<double>(skipped) > 0.01 * static_cast<double>(steps_this_epoch);
        log.val_mae = validation_mae(model, series, norm, split, workers, &log.val_rmse);
        result.log.push_back(log);

        if (log.val_mae < best_val) {
            best_val = log.val_mae;
            result.best_epoch = epoch;
            best_params.clear();
            for (auto& [name, p] : named) best_params.push_back(p->clone());
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }

    if (!best_params.empty()) {
        for (size_t pi = 0; pi < named.size(); ++pi) {
            std::copy(best_params[pi].buf->begin(), best_params[pi].buf->end(),
                      named[pi].second->buf->begin());
        }
        result.best_val_mae = best_val;
    }
    return result;
}

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("train log: cannot open for writing: " + path);
    os << "epoch,step,train_loss,val_mae,val_rmse,lr,skipped_steps\n";
    char buf[256];
    for (const auto& l : log) {
        std::snprintf(buf, sizeof(buf), "%d,%lld,%.9g,%.9g,%.9g,%.9g,%lld\n", l.epoch,
                      static_cast<long long>(l.step), l.train_loss, l.val_mae, l.val_rmse, l.lr,
                      static_cast<long long>(l.skipped_steps));
        os << buf;
    }
}

GradCheckResult grad_check(NestModel<double>& model, const Tensor<double>& x_seq,
                           const Tensor<double>& target, double mu_l, double fd_step) {
    const ModelConfig& mc = model.cfg;
    // fixed nonzero memory state and surprise so the slow path carries signal
    MemoryState<double> mem = MemoryState<double>::zeros(1, mc.channels, mc.patch_h, mc.patch_w);
    Rng rng(7);
    for (auto& v : *mem.m.buf) v = rng.uniform(-0.5, 0.5);
    Surprise<double> s;
    s.s = Tensor<double>({1, 1, mc.patch_h, mc.patch_w});
    for (auto& v : *s.s.buf) v = rng.uniform(0.0, 0.5);

    auto loss_value = [&]() {
        MemoryState<double> m2;
        m2.m = mem.m.clone();
        auto out = model.forward(nullptr, x_seq, mc.use_memory ? &m2 : nullptr, &s);
        Tensor<double> l = prediction_loss<double>(nullptr, out.y_hat, target, 1.0, mu_l);
        return l[0];
    };

    // tape gradients
    Tape<double> tape;
    model.watch_params(tape);
    MemoryState<double> m2;
    m2.m = mem.m.clone();
    auto out = model.forward(&tape, x_seq, mc.use_memory ? &m2 : nullptr, &s);
    auto loss = prediction_loss(&tape, out.y_hat, target, 1.0, mu_l);
    tape.backward(loss);

    GradCheckResult res;
    for (auto& [name, p] : model.named_params()) {
        Tensor<double> g = tape.grad(*p);
        for (int64_t i = 0; i < p->numel(); ++i) {
            const double keep = (*p)[i];
            (*p)[i] = keep + fd_step;
            const double up = loss_value();
            (*p)[i] = keep - fd_step;
            const double dn = loss_value();
            (*p)[i] = keep;
            const double fd = (up - dn) / (2.0 * fd_step);
            const double rel = std::abs(fd - g[i]) / std::max(std::abs(fd) + std::abs(g[i]), 1e-6);
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace nests6
