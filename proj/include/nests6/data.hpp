#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nests6/tensor.hpp"

namespace nests6 {

// Time-ordered stack of H x W traffic frames, raw units.
struct GridSeries {
    Tensor<float> frames;  // [N, H, W]
    uint32_t dt_minutes = 10;
    uint64_t origin_timestamp = 0;  // 0 = absent

    int n() const { return frames.dim(0); }
    int h() const { return frames.dim(1); }
    int w() const { return frames.dim(2); }

    float* frame(int t) { return frames.ptr() + static_cast<int64_t>(t) * h() * w(); }
    const float* frame(int t) const { return frames.ptr() + static_cast<int64_t>(t) * h() * w(); }
};

// Grid Series Format: little-endian, magic "GRIDSER1", u32 N/H/W/dt_minutes,
// u64 origin_timestamp, then N*H*W float32 row-major frames (32-byte header).
void save_series(const GridSeries& s, const std::string& path);
GridSeries load_series(const std::string& path);

// Sparse CSV import with columns (t, row, col, value); missing cells are zero.
GridSeries load_series_csv(const std::string& path, uint32_t dt_minutes = 10);

// Global z-score fit on the training split, reused verbatim elsewhere.
struct Normalizer {
    double mean = 0.0;
    double std = 1.0;

    static Normalizer fit(const float* data, int64_t n);
    float apply(float x) const { return static_cast<float>((x - mean) / std); }
    float invert(float z) const { return static_cast<float>(z * std + mean); }
};

// Non-overlapping tiling; origins in row-major order.
struct Patch {
    int row = 0;
    int col = 0;
    Tensor<float> values;  // [H_p, W_p]
};

std::vector<Patch> tile_patches(const Tensor<float>& frame, int patch_h, int patch_w);
Tensor<float> stitch_patches(const std::vector<Patch>& patches, int H, int W);

// Chronological split by target frame index.
struct SplitSpec {
    double train_frac = 0.7;
    double val_frac = 0.1;
};

struct Split {
    int train_end = 0;  // frames [0, train_end) belong to train
    int val_end = 0;    // frames [train_end, val_end) to val, rest to test
};

Split chronological_split(int n_frames, const SplitSpec& spec);

// One supervised sample: the last T frames of one patch location plus the
// next frame at the same location.
struct WindowSample {
    int target_frame = 0;  // index of the target (inputs are the T frames before it)
    int patch_row = 0;
    int patch_col = 0;
};

struct WindowPlan {
    int t_window = 6;
    int patch_h = 0, patch_w = 0;
    int patches_y = 0, patches_x = 0;
    std::vector<WindowSample> samples;  // chronological, location-major within a frame
};

WindowPlan make_windows(const GridSeries& series, int t_window, int patch_h, int patch_w,
                        int first_target, int last_target);

// Materialize one sample in normalized units: window [T, H_p, W_p], target [H_p, W_p].
Tensor<float> extract_window(const GridSeries& series, const Normalizer& norm,
                             const WindowSample& s, int t_window, int patch_h, int patch_w);
Tensor<float> extract_target(const GridSeries& series, const Normalizer& norm,
                             const WindowSample& s, int patch_h, int patch_w);

// Synthetic traffic: diffused hotspots with diurnal amplitudes and
// multiplicative log-normal noise, clamped nonnegative.
struct SynthConfig {
    int H = 20;
    int W = 20;
    int N = 2000;
    int diurnal_period_steps = 144;  // 24 h at 10-minute sampling
    int n_hotspots = 6;
    double diffusion_coefficient = 0.2;  // explicit 5-point steps; must be <= 0.25
    double noise_std = 0.3;              // sigma of the log-normal factor
    uint64_t seed = 1;

    void validate() const;
};

GridSeries synth_generate(const SynthConfig& cfg);

// Inference-time input transforms probing non-stationarity.
enum class DriftKind { none, scale_offset, spatial_shift, volatility };

struct DriftSpec {
    DriftKind kind = DriftKind::none;
    double alpha = 1.25;
    double beta = 0.25;
    int k = 5;
    double sigma = 0.25;
    uint64_t seed = 0;
};

const char* drift_kind_name(DriftKind k);
DriftKind drift_kind_from_name(const std::string& name);

// Applies the transform to a whole frame stack in normalized units. The
// spatial shift translates by (+k, +k) with zero fill and must be applied at
// full-frame level before tiling.
Tensor<float> drift_apply(const Tensor<float>& frames, const DriftSpec& spec);

}  // namespace nests6
