#pragma once

#include <string>
#include <vector>

#include "nests6/data.hpp"
#include "nests6/eval.hpp"
#include "nests6/model.hpp"
#include "nests6/ops.hpp"

namespace nests6 {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 16;
    double lr = 1e-3;
    double laplacian_weight = 0.1;
    double smooth_l1_beta = 1.0;
    double grad_clip_norm = 1.0;
    int patience = 5;
    SplitSpec split;
    uint64_t seed = 1;
    int workers = 1;

    void validate() const {
        if (epochs < 0 || batch_size < 1 || lr <= 0 || laplacian_weight < 0 ||
            smooth_l1_beta <= 0 || grad_clip_norm <= 0 || patience < 1 || workers < 1)
            throw ConfigError("train config: invalid values");
    }
};

struct EpochLog {
    int epoch = 0;
    int64_t step = 0;  // cumulative optimizer steps
    double train_loss = 0.0;
    double val_mae = 0.0;
    double val_rmse = 0.0;
    double lr = 0.0;
    int64_t skipped_steps = 0;
    bool flagged = false;  // > 1% of steps skipped
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = -1;
    double best_val_mae = 0.0;
    Split split;
};

// Scalar loss for one sample: SmoothL1 data term plus the weighted interior
// Laplacian penalty (skipped when the patch has no interior).
template <typename T>
Tensor<T> prediction_loss(Tape<T>* tp, const Tensor<T>& y_hat, const Tensor<T>& target,
                          double smooth_l1_beta, double laplacian_weight) {
    auto loss = ops::smooth_l1_mean(tp, y_hat, target, smooth_l1_beta);
    const int H = y_hat.dim(y_hat.rank() - 2), W = y_hat.dim(y_hat.rank() - 1);
    if (laplacian_weight > 0 && H >= 3 && W >= 3)
        loss = ops::add(tp, loss,
                        ops::affine(tp, ops::laplacian_penalty(tp, y_hat), laplacian_weight, 0.0));
    return loss;
}

// One-step-ahead training over chronologically ordered per-location streams.
// A chunk of locations at one target frame is one optimizer step; memory
// writes use the previous step's surprise; the model is left holding the
// best-validation parameters.
TrainResult train_model(NestModel<float>& model, const GridSeries& series, const Normalizer& norm,
                        const TrainConfig& cfg);

void write_train_log_csv(const std::vector<EpochLog>& log, const std::string& path);

// Central finite differences against the tape for every parameter coordinate.
struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// Runs in double precision on a fixed sample. The memory path (when the model
// has one) is exercised with a fixed nonzero memory state and surprise.
GradCheckResult grad_check(NestModel<double>& model, const Tensor<double>& x_seq,
                           const Tensor<double>& target, double mu_l, double fd_step = 1e-5);

}  // namespace nests6
