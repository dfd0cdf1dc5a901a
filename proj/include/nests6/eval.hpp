#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nests6/data.hpp"
#include "nests6/model.hpp"
#include "nests6/tensor.hpp"

namespace nests6 {

struct MetricReport {
    double mae = 0.0;
    double rmse = 0.0;
    int horizon = 1;
    int64_t n_samples = 0;
    DriftKind drift = DriftKind::none;
    bool memory_enabled = true;
};

struct MetricAccum {
    double abs_sum = 0.0;
    double sq_sum = 0.0;
    int64_t n = 0;

    void add(double raw_err) {
        abs_sum += std::abs(raw_err);
        sq_sum += raw_err * raw_err;
        n += 1;
    }

    void merge(const MetricAccum& o) {
        abs_sum += o.abs_sum;
        sq_sum += o.sq_sum;
        n += o.n;
    }

    MetricReport report() const;
};

// Denormalizes both operands, then mae = mean|d|, rmse = sqrt(mean d^2).
MetricReport mae_rmse(const Tensor<float>& preds, const Tensor<float>& targets,
                      const Normalizer& norm);

struct EvalOptions {
    int first_target = 0;
    int last_target = 0;
    int horizon = 1;
    DriftSpec drift;
    bool memory_enabled = true;
    bool collect_map = false;
    int workers = 1;
};

// Per-horizon reports over a shared anchor set, with the Table-style
// accumulation deltas mae(h=H) - mae(h=1).
struct EvalResult {
    std::vector<MetricReport> per_horizon;
    double delta_mae = 0.0;
    double delta_rmse = 0.0;
    Tensor<float> rmse_map;  // [H,W] in raw units when collect_map was set
    int64_t rollout_write_calls = 0;  // must stay 0: rollouts never write memory
};

// Teacher-forced sweep over the segment (memory writes driven by the previous
// step's surprise) plus, when horizon > 1, a free-running rollout from every
// anchor in which the memory evolves only via decay. The h=1 row of a rollout
// is the single-step evaluation: the anchor prediction is made from real
// frames with the committed post-write memory, and no rollout step ever
// writes. Evaluation never mutates parameters (checksum-asserted).
EvalResult evaluate(NestModel<float>& model, const GridSeries& series, const Normalizer& norm,
                    const EvalOptions& opts);

// The trivial forecaster: the next frame equals the last observed frame.
EvalResult persistence_eval(const GridSeries& series, const Normalizer& norm, int first_target,
                            int last_target, int horizon, const DriftSpec& drift = {});

// Analytic multiply-accumulate ledger for one full-grid reconstruction.
// Rows are per-patch, per-step counts; total = sum(rows) * T * n_patches, so
// the total is exactly linear in the patch count and in T. The once-per-window
// slow write is reported separately and excluded from the total.
// Conventions: one MAC = one multiply (+accumulate); plain additions are not
// counted; exp/softplus/sigmoid evaluations are reported as a separate
// transcendental tally.
struct MacCount {
    struct Row {
        std::string layer;
        int64_t per_patch_step;
    };
    std::vector<Row> rows;
    int64_t per_patch_step_total = 0;
    int64_t total = 0;
    int64_t transcendental_per_patch_step = 0;
    int64_t slow_write_per_window = 0;
    int n_patches = 0;
    int t_window = 0;
};

MacCount count_macs(const ModelConfig& cfg, int grid_h, int grid_w);

}  // namespace nests6
