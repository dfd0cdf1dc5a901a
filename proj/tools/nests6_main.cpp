// nests6 command-line harness: synthetic data generation, training,
// evaluation, rollouts, drift suites and MAC accounting, all driven by a
// declarative "key = value" config.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <string>

#include "nests6/checkpoint.hpp"
#include "nests6/config.hpp"
#include "nests6/eval.hpp"
#include "nests6/reports.hpp"
#include "nests6/train.hpp"

using namespace nests6;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_override;
    int workers_override = 0;
};

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = RunConfig::parse_file(args.config_path);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    if (args.workers_override > 0) cfg.workers = args.workers_override;
    fs::create_directories(cfg.out_dir);
    return cfg;
}

void print_series_stats(const GridSeries& s) {
    double mn = 1e300, mx = -1e300, sum = 0;
    for (int64_t i = 0; i < s.frames.numel(); ++i) {
        mn = std::min(mn, static_cast<double>(s.frames[i]));
        mx = std::max(mx, static_cast<double>(s.frames[i]));
        sum += s.frames[i];
    }
    std::printf("series: N=%d H=%d W=%d dt=%u min  min=%.4g max=%.4g mean=%.4g\n", s.n(), s.h(),
                s.w(), s.dt_minutes, mn, mx, sum / static_cast<double>(s.frames.numel()));
}

int cmd_synth(const CommonArgs& args, std::string out_file) {
    RunConfig cfg = load_config(args);
    auto series = synth_generate(cfg.synth_config());
    if (out_file.empty()) out_file = (fs::path(cfg.out_dir) / "series.bin").string();
    save_series(series, out_file);
    print_series_stats(series);
    std::printf("wrote %s\n", out_file.c_str());
    return 0;
}

void validate_data_against_model(const GridSeries& series, const ModelConfig& mc) {
    if (series.h() % mc.patch_h != 0 || series.w() % mc.patch_w != 0)
        throw DataError("grid " + std::to_string(series.h()) + "x" + std::to_string(series.w()) +
                        " is not divisible by patch " + std::to_string(mc.patch_h) + "x" +
                        std::to_string(mc.patch_w));
    if (series.n() < mc.t_window + 1)
        throw DataError("series too short: need at least T+1 = " +
                        std::to_string(mc.t_window + 1) + " frames");
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    cfg.model.validate();
    auto series = cfg.load_or_generate();
    validate_data_against_model(series, cfg.model);
    TrainConfig tc = cfg.train_config();
    tc.validate();
    const Split split = chronological_split(series.n(), tc.split);
    auto norm = Normalizer::fit(series.frames.ptr(),
                                static_cast<int64_t>(split.train_end) * series.h() * series.w());

    NestModel<float> model(cfg.model, Rng::stream(cfg.seed, "init"));
    auto result = train_model(model, series, norm, tc);

    const std::string ckpt_path = (fs::path(cfg.out_dir) / "model.ckpt").string();
    save_checkpoint(checkpoint_from_model(model, norm), ckpt_path);
    write_train_log_csv(result.log, (fs::path(cfg.out_dir) / "train_log.csv").string());

    if (!result.log.empty()) {
        auto persistence =
            persistence_eval(series, norm, std::max(cfg.model.t_window, split.train_end),
                             split.val_end - 1, 1);
        std::printf("final val MAE %.6g (persistence %.6g)\n", result.log.back().val_mae,
                    persistence.per_horizon[0].mae);
    }
    std::printf("wrote %s\n", ckpt_path.c_str());
    return 0;
}

struct EvalArgs {
    std::string ckpt;
    int horizon = 1;
    std::string drift_kind;
    bool no_memory = false;
    bool per_pixel_map = false;
};

int cmd_eval(const CommonArgs& args, const EvalArgs& eargs) {
    RunConfig cfg = load_config(args);
    NestModel<float> model;
    Normalizer norm;
    auto ck = load_checkpoint(eargs.ckpt);
    model_from_checkpoint(ck, model, norm);
    if (cfg.model_section_explicit()) {
        ModelConfig file_cfg = cfg.model;
        if (!file_cfg.same_architecture(model.cfg)) {
            std::fprintf(stderr,
                         "checkpoint/config mismatch:\n  checkpoint: D=%d Ds=%d blocks=%d win=%d "
                         "r=%d patch=%dx%d T=%d mem=%d\n  config:     D=%d Ds=%d blocks=%d win=%d "
                         "r=%d patch=%dx%d T=%d mem=%d\n",
                         model.cfg.channels, model.cfg.state_dim, model.cfg.n_blocks,
                         model.cfg.resolved_window(), model.cfg.low_rank, model.cfg.patch_h,
                         model.cfg.patch_w, model.cfg.t_window, model.cfg.use_memory ? 1 : 0,
                         file_cfg.channels, file_cfg.state_dim, file_cfg.n_blocks,
                         file_cfg.resolved_window(), file_cfg.low_rank, file_cfg.patch_h,
                         file_cfg.patch_w, file_cfg.t_window, file_cfg.use_memory ? 1 : 0);
            throw ConfigError("checkpoint and config disagree on the architecture");
        }
    }
    auto series = cfg.load_or_generate();
    validate_data_against_model(series, model.cfg);
    const Split split = chronological_split(series.n(), {cfg.train_frac, cfg.val_frac});

    EvalOptions opts;
    opts.first_target = std::max(model.cfg.t_window, split.val_end);
    opts.last_target = series.n() - 1;
    opts.horizon = eargs.horizon;
    opts.memory_enabled = !eargs.no_memory;
    opts.collect_map = eargs.per_pixel_map;
    opts.workers = cfg.workers;
    opts.drift = cfg.drift;
    if (!eargs.drift_kind.empty()) opts.drift.kind = drift_kind_from_name(eargs.drift_kind);

    auto res = evaluate(model, series, norm, opts);

    std::vector<ReportRow> rows;
    for (const auto& r : res.per_horizon) {
        rows.push_back({cfg.run_id, "test", r.horizon, r.drift, r.memory_enabled, r.mae, r.rmse,
                        r.n_samples});
        std::printf("h=%d drift=%s memory=%s mae=%.6g rmse=%.6g n=%lld\n", r.horizon,
                    drift_kind_name(r.drift), r.memory_enabled ? "on" : "off", r.mae, r.rmse,
                    static_cast<long long>(r.n_samples));
    }
    if (opts.horizon > 1)
        std::printf("delta mae=%.6g rmse=%.6g (h=%d minus h=1)\n", res.delta_mae, res.delta_rmse,
                    opts.horizon);
    const std::string report_path = (fs::path(cfg.out_dir) / "report.csv").string();
    write_report_csv(rows, report_path);
    std::printf("wrote %s\n", report_path.c_str());
    if (eargs.per_pixel_map) {
        const std::string map_path = (fs::path(cfg.out_dir) / "rmse_map.pgm").string();
        write_pgm16(res.rmse_map, map_path);
        std::printf("wrote %s\n", map_path.c_str());
    }
    return 0;
}

int cmd_drift(const CommonArgs& args, const std::string& ckpt) {
    RunConfig cfg = load_config(args);
    NestModel<float> model;
    Normalizer norm;
    model_from_checkpoint(load_checkpoint(ckpt), model, norm);
    auto series = cfg.load_or_generate();
    validate_data_against_model(series, model.cfg);
    const Split split = chronological_split(series.n(), {cfg.train_frac, cfg.val_frac});

    std::vector<ReportRow> rows;
    std::printf("%-14s %12s %12s %10s\n", "drift", "memory MAE", "no-mem MAE", "delta");
    for (DriftKind kind : {DriftKind::none, DriftKind::scale_offset, DriftKind::spatial_shift,
                           DriftKind::volatility}) {
        double mae_pair[2] = {0, 0};
        for (bool memory : {true, false}) {
            EvalOptions opts;
            opts.first_target = std::max(model.cfg.t_window, split.val_end);
            opts.last_target = series.n() - 1;
            opts.horizon = 1;
            opts.memory_enabled = memory;
            opts.workers = cfg.workers;
            opts.drift = cfg.drift;
            opts.drift.kind = kind;
            auto res = evaluate(model, series, norm, opts);
            const auto& r = res.per_horizon[0];
            rows.push_back({cfg.run_id, "test", 1, kind, memory, r.mae, r.rmse, r.n_samples});
            mae_pair[memory ? 0 : 1] = r.mae;
        }
        std::printf("%-14s %12.6g %12.6g %10.6g\n", drift_kind_name(kind), mae_pair[0],
                    mae_pair[1], mae_pair[1] - mae_pair[0]);
    }
    const std::string path = (fs::path(cfg.out_dir) / "drift_report.csv").string();
    write_report_csv(rows, path);
    std::printf("wrote %s\n", path.c_str());
    return 0;
}

int cmd_macs(const CommonArgs& args, const std::string& ckpt, const std::string& grid) {
    RunConfig cfg = load_config(args);
    ModelConfig mc = cfg.model;
    if (!ckpt.empty()) mc = config_from_header(load_checkpoint(ckpt).header);
    int gh = cfg.synth.H, gw = cfg.synth.W;
    if (!grid.empty()) {
        const size_t x = grid.find('x');
        if (x == std::string::npos)
            throw ConfigError("macs: --grid wants HxW, got '" + grid + "'");
        gh = std::stoi(grid.substr(0, x));
        gw = std::stoi(grid.substr(x + 1));
    }
    auto mac = count_macs(mc, gh, gw);
    std::printf("MAC ledger for %dx%d grid, %d patches, T=%d (per patch per step)\n", gh, gw,
                mac.n_patches, mac.t_window);
    for (const auto& r : mac.rows) std::printf("  %-18s %12lld\n", r.layer.c_str(),
                                               static_cast<long long>(r.per_patch_step));
    std::printf("  %-18s %12lld\n", "per-step total", static_cast<long long>(mac.per_patch_step_total));
    std::printf("  %-18s %12lld\n", "transcendental", static_cast<long long>(mac.transcendental_per_patch_step));
    std::printf("  %-18s %12lld (once per window, outside the total)\n", "slow write",
                static_cast<long long>(mac.slow_write_per_window));
    std::printf("total = per-step x T x patches = %lld\n", static_cast<long long>(mac.total));

    std::ofstream csv((fs::path(cfg.out_dir) / "macs.csv").string(), std::ios::trunc);
    csv << "layer,macs_per_patch_step\n";
    for (const auto& r : mac.rows) csv << r.layer << "," << r.per_patch_step << "\n";
    csv << "total," << mac.total << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nests6: convolutional selective state-space grid forecaster"};
    app.require_subcommand(1);

    CommonArgs common;
    EvalArgs eargs;
    std::string out_file, grid;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "run configuration file")->required();
        sub->add_option("--out-dir", common.out_override, "override the output directory");
        sub->add_option("--workers", common.workers_override,
                        "cap internal parallelism (1 = bit-reproducible)");
    };

    auto* synth = app.add_subcommand("synth", "generate a synthetic grid series file");
    add_common(synth);
    synth->add_option("--out", out_file, "output series path (default <out_dir>/series.bin)");

    auto* train = app.add_subcommand("train", "train a model; writes checkpoint and log");
    add_common(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval);
    eval->add_option("--ckpt", eargs.ckpt, "checkpoint file")->required();
    eval->add_option("--horizon", eargs.horizon, "autoregressive rollout horizon (default 1)");
    eval->add_option("--drift", eargs.drift_kind,
                     "drift kind: none|scale_offset|spatial_shift|volatility");
    eval->add_flag("--no-memory", eargs.no_memory, "force M=0 and suppress writes");
    eval->add_flag("--per-pixel-map", eargs.per_pixel_map, "export a per-pixel RMSE heatmap (PGM)");

    auto* rollout = app.add_subcommand("rollout", "eval with a 6-step rollout horizon");
    add_common(rollout);
    rollout->add_option("--ckpt", eargs.ckpt, "checkpoint file")->required();
    int rollout_h = 6;
    rollout->add_option("--horizon", rollout_h, "rollout horizon (default 6)");
    rollout->add_flag("--no-memory", eargs.no_memory, "force M=0 and suppress writes");

    auto* drift = app.add_subcommand("drift", "run all four drift kinds x {memory, no-memory}");
    add_common(drift);
    std::string drift_ckpt;
    drift->add_option("--ckpt", drift_ckpt, "checkpoint file")->required();

    auto* macs = app.add_subcommand("macs", "analytic MAC ledger for a config or checkpoint");
    add_common(macs);
    std::string macs_ckpt;
    macs->add_option("--ckpt", macs_ckpt, "checkpoint file (architecture source)");
    macs->add_option("--grid", grid, "full grid as HxW (default: data dims from config)");

    try {
        app.parse(argc, argv);
        if (synth->parsed()) return cmd_synth(common, out_file);
        if (train->parsed()) return cmd_train(common);
        if (eval->parsed()) return cmd_eval(common, eargs);
        if (rollout->parsed()) {
            eargs.horizon = rollout_h;
            return cmd_eval(common, eargs);
        }
        if (drift->parsed()) return cmd_drift(common, drift_ckpt);
        if (macs->parsed()) return cmd_macs(common, macs_ckpt, grid);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    }
}
