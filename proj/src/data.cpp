#include "nests6/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nests6/error.hpp"
#include "nests6/rng.hpp"

namespace nests6 {

namespace {

constexpr char kMagic[8] = {'G', 'R', 'I', 'D', 'S', 'E', 'R', '1'};

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    write_u32(os, static_cast<uint32_t>(v));
    write_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("grid series: truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t read_u64(std::istream& is) {
    const uint64_t lo = read_u32(is);
    const uint64_t hi = read_u32(is);
    return lo | (hi << 32);
}

}  // namespace

void save_series(const GridSeries& s, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("grid series: cannot open for writing: " + path);
    os.write(kMagic, 8);
    write_u32(os, static_cast<uint32_t>(s.n()));
    write_u32(os, static_cast<uint32_t>(s.h()));
    write_u32(os, static_cast<uint32_t>(s.w()));
    write_u32(os, s.dt_minutes);
    write_u64(os, s.origin_timestamp);
    os.write(reinterpret_cast<const char*>(s.frames.ptr()),
             static_cast<std::streamsize>(s.frames.numel() * sizeof(float)));
    if (!os) throw DataError("grid series: write failed: " + path);
}

GridSeries load_series(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("grid series: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("grid series: bad magic in " + path);
    GridSeries s;
    const uint32_t n = read_u32(is);
    const uint32_t h = read_u32(is);
    const uint32_t w = read_u32(is);
    s.dt_minutes = read_u32(is);
    s.origin_timestamp = read_u64(is);
    const int64_t count = static_cast<int64_t>(n) * h * w;
    if (count <= 0 || n > (1u << 24) || h > (1u << 16) || w > (1u << 16))
        throw DataError("grid series: implausible dimensions in " + path);
    s.frames = Tensor<float>({static_cast<int>(n), static_cast<int>(h), static_cast<int>(w)});
    is.read(reinterpret_cast<char*>(s.frames.ptr()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(count * sizeof(float)))
        throw DataError("grid series: truncated payload in " + path + " (header claims " +
                        std::to_string(n) + " frames)");
    for (int64_t i = 0; i < count; ++i)
        if (!std::isfinite(s.frames[i]))
            throw DataError("grid series: non-finite value at flat index " + std::to_string(i));
    return s;
}

GridSeries load_series_csv(const std::string& path, uint32_t dt_minutes) {
    std::ifstream is(path);
    if (!is) throw DataError("grid series: cannot open: " + path);
    struct Row {
        int t, r, c;
        float v;
    };
    std::vector<Row> rows;
    int max_t = -1, max_r = -1, max_c = -1;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ls(line);
        Row row{};
        if (!(ls >> row.t >> row.r >> row.c >> row.v)) {
            if (lineno == 1) continue;  // header line
            throw DataError("grid series csv: malformed line " + std::to_string(lineno));
        }
        if (row.t < 0 || row.r < 0 || row.c < 0)
            throw DataError("grid series csv: negative index at line " + std::to_string(lineno));
        if (!std::isfinite(row.v))
            throw DataError("grid series csv: non-finite value at line " + std::to_string(lineno));
        max_t = std::max(max_t, row.t);
        max_r = std::max(max_r, row.r);
        max_c = std::max(max_c, row.c);
        rows.push_back(row);
    }
    if (rows.empty()) throw DataError("grid series csv: no data rows in " + path);
    GridSeries s;
    s.dt_minutes = dt_minutes;
    s.frames = Tensor<float>({max_t + 1, max_r + 1, max_c + 1});
    for (const auto& row : rows)
        s.frames[(static_cast<int64_t>(row.t) * s.h() + row.r) * s.w() + row.c] = row.v;
    return s;
}

Normalizer Normalizer::fit(const float* data, int64_t n) {
    if (n <= 0) throw DataError("normalizer: empty fit data");
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) sum += data[i];
    const double mean = sum / static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = data[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    Normalizer norm;
    norm.mean = mean;
    norm.std = std::sqrt(var);
    if (!(norm.std > 0)) throw DataError("normalizer: zero variance in training split");
    return norm;
}

std::vector<Patch> tile_patches(const Tensor<float>& frame, int patch_h, int patch_w) {
    if (frame.rank() != 2) throw ShapeError("tile_patches: want [H,W], got " + frame.shape_str());
    const int H = frame.dim(0), W = frame.dim(1);
    if (patch_h <= 0 || patch_w <= 0 || H % patch_h != 0 || W % patch_w != 0)
        throw DataError("tile_patches: patch " + std::to_string(patch_h) + "x" +
                        std::to_string(patch_w) + " must divide frame " + std::to_string(H) + "x" +
                        std::to_string(W));
    std::vector<Patch> out;
    out.reserve(static_cast<size_t>((H / patch_h) * (W / patch_w)));
    for (int r = 0; r < H; r += patch_h)
        for (int c = 0; c < W; c += patch_w) {
            Patch p;
            p.row = r;
            p.col = c;
            p.values = Tensor<float>({patch_h, patch_w});
            for (int i = 0; i < patch_h; ++i)
                for (int j = 0; j < patch_w; ++j)
                    p.values[i * patch_w + j] = frame[(r + i) * W + c + j];
            out.push_back(std::move(p));
        }
    return out;
}

Tensor<float> stitch_patches(const std::vector<Patch>& patches, int H, int W) {
    if (patches.empty()) throw DataError("stitch_patches: no patches");
    const int ph = patches.front().values.dim(0);
    const int pw = patches.front().values.dim(1);
    Tensor<float> frame({H, W});
    std::vector<char> covered(static_cast<size_t>(H) * W, 0);
    for (const auto& p : patches) {
        if (p.values.dim(0) != ph || p.values.dim(1) != pw)
            throw DataError("stitch_patches: inconsistent patch sizes");
        if (p.row < 0 || p.col < 0 || p.row + ph > H || p.col + pw > W)
            throw DataError("stitch_patches: patch at (" + std::to_string(p.row) + "," +
                            std::to_string(p.col) + ") exceeds frame");
        for (int i = 0; i < ph; ++i)
            for (int j = 0; j < pw; ++j) {
                const int64_t idx = static_cast<int64_t>(p.row + i) * W + p.col + j;
                if (covered[static_cast<size_t>(idx)])
                    throw DataError("stitch_patches: overlap at cell (" +
                                    std::to_string(p.row + i) + "," + std::to_string(p.col + j) + ")");
                covered[static_cast<size_t>(idx)] = 1;
                frame[idx] = p.values[i * pw + j];
            }
    }
    for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i)
        if (!covered[static_cast<size_t>(i)])
            throw DataError("stitch_patches: gap at cell " + std::to_string(i));
    return frame;
}

Split chronological_split(int n_frames, const SplitSpec& spec) {
    if (spec.train_frac <= 0 || spec.val_frac < 0 || spec.train_frac + spec.val_frac >= 1.0)
        throw ConfigError("split: fractions must satisfy 0 < train, 0 <= val, train+val < 1");
    Split s;
    s.train_end = static_cast<int>(std::floor(spec.train_frac * n_frames));
    s.val_end = static_cast<int>(std::floor((spec.train_frac + spec.val_frac) * n_frames));
    s.train_end = std::max(1, s.train_end);
    s.val_end = std::max(s.train_end, std::min(s.val_end, n_frames - 1));
    return s;
}

WindowPlan make_windows(const GridSeries& series, int t_window, int patch_h, int patch_w,
                        int first_target, int last_target) {
    if (t_window < 1) throw ConfigError("make_windows: T must be >= 1");
    if (series.n() < t_window + 1)
        throw DataError("make_windows: need at least T+1 = " + std::to_string(t_window + 1) +
                        " frames, have " + std::to_string(series.n()));
    if (series.h() % patch_h != 0 || series.w() % patch_w != 0)
        throw DataError("make_windows: patch dims must divide the grid");
    WindowPlan plan;
    plan.t_window = t_window;
    plan.patch_h = patch_h;
    plan.patch_w = patch_w;
    plan.patches_y = series.h() / patch_h;
    plan.patches_x = series.w() / patch_w;
    const int lo = std::max(first_target, t_window);
    const int hi = std::min(last_target, series.n() - 1);
    for (int t = lo; t <= hi; ++t)
        for (int py = 0; py < plan.patches_y; ++py)
            for (int px = 0; px < plan.patches_x; ++px)
                plan.samples.push_back({t, py * patch_h, px * patch_w});
    return plan;
}

Tensor<float> extract_window(const GridSeries& series, const Normalizer& norm,
                             const WindowSample& s, int t_window, int patch_h, int patch_w) {
    Tensor<float> x({t_window, patch_h, patch_w});
    const int W = series.w();
    for (int t = 0; t < t_window; ++t) {
        const float* f = series.frame(s.target_frame - t_window + t);
        for (int i = 0; i < patch_h; ++i)
            for (int j = 0; j < patch_w; ++j)
                x[(static_cast<int64_t>(t) * patch_h + i) * patch_w + j] =
                    norm.apply(f[(s.patch_row + i) * W + s.patch_col + j]);
    }
    return x;
}

Tensor<float> extract_target(const GridSeries& series, const Normalizer& norm,
                             const WindowSample& s, int patch_h, int patch_w) {
    Tensor<float> y({patch_h, patch_w});
    const int W = series.w();
    const float* f = series.frame(s.target_frame);
    for (int i = 0; i < patch_h; ++i)
        for (int j = 0; j < patch_w; ++j)
            y[i * patch_w + j] = norm.apply(f[(s.patch_row + i) * W + s.patch_col + j]);
    return y;
}

void SynthConfig::validate() const {
    if (H <= 0 || W <= 0 || N <= 0 || diurnal_period_steps <= 0 || n_hotspots < 0 ||
        noise_std < 0 || diffusion_coefficient < 0)
        throw ConfigError("synth: all dimensions must be positive");
    // explicit 5-point diffusion is stable for kappa <= 0.25
    if (diffusion_coefficient > 0.25)
        throw ConfigError("synth: diffusion_coefficient " + std::to_string(diffusion_coefficient) +
                          " exceeds the explicit-scheme stability bound 0.25");
}

GridSeries synth_generate(const SynthConfig& cfg) {
    cfg.validate();
    const int H = cfg.H, W = cfg.W;
    const int64_t hw = static_cast<int64_t>(H) * W;

    Rng place = Rng::stream(cfg.seed, "synth.hotspots");
    struct Hotspot {
        int r, c;
        double amp, phase;
    };
    std::vector<Hotspot> spots;
    for (int k = 0; k < cfg.n_hotspots; ++k) {
        Hotspot h;
        h.r = static_cast<int>(place.below(static_cast<uint64_t>(H)));
        h.c = static_cast<int>(place.below(static_cast<uint64_t>(W)));
        h.amp = place.uniform(0.5, 1.5);
        h.phase = place.uniform(0.0, 6.283185307179586);
        spots.push_back(h);
    }

    // Diffuse each hotspot's unit impulse once; frames are then amplitude-
    // weighted superpositions of the diffused templates.
    const int diffusion_steps = 40;
    std::vector<std::vector<double>> templates;
    for (const auto& h : spots) {
        std::vector<double> f(static_cast<size_t>(hw), 0.0);
        f[static_cast<size_t>(h.r) * W + h.c] = 100.0;
        std::vector<double> g(f.size());
        for (int step = 0; step < diffusion_steps; ++step) {
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const double up = i > 0 ? f[static_cast<size_t>(i - 1) * W + j] : 0.0;
                    const double dn = i + 1 < H ? f[static_cast<size_t>(i + 1) * W + j] : 0.0;
                    const double lf = j > 0 ? f[static_cast<size_t>(i) * W + j - 1] : 0.0;
                    const double rt = j + 1 < W ? f[static_cast<size_t>(i) * W + j + 1] : 0.0;
                    const double cc = f[static_cast<size_t>(i) * W + j];
                    g[static_cast<size_t>(i) * W + j] =
                        cc + cfg.diffusion_coefficient * (up + dn + lf + rt - 4.0 * cc);
                }
            f.swap(g);
        }
        templates.push_back(std::move(f));
    }

    Rng noise = Rng::stream(cfg.seed, "synth.noise");
    GridSeries s;
    s.dt_minutes = 10;
    s.frames = Tensor<float>({cfg.N, H, W});
    const double omega = 6.283185307179586 / static_cast<double>(cfg.diurnal_period_steps);
    for (int t = 0; t < cfg.N; ++t) {
        float* frame = s.frame(t);
        std::vector<double> clean(static_cast<size_t>(hw), 0.0);
        for (size_t k = 0; k < spots.size(); ++k) {
            const double a = spots[k].amp * 0.5 * (1.0 + std::sin(omega * t + spots[k].phase));
            const auto& tmpl = templates[k];
            for (int64_t i = 0; i < hw; ++i) clean[static_cast<size_t>(i)] += a * tmpl[static_cast<size_t>(i)];
        }
        for (int64_t i = 0; i < hw; ++i) {
            double v = clean[static_cast<size_t>(i)];
            if (cfg.noise_std > 0) v *= std::exp(cfg.noise_std * noise.normal());
            frame[i] = static_cast<float>(std::max(0.0, v));
        }
    }
    return s;
}

const char* drift_kind_name(DriftKind k) {
    switch (k) {
        case DriftKind::none: return "none";
        case DriftKind::scale_offset: return "scale_offset";
        case DriftKind::spatial_shift: return "spatial_shift";
        case DriftKind::volatility: return "volatility";
    }
    return "?";
}

DriftKind drift_kind_from_name(const std::string& name) {
    if (name == "none") return DriftKind::none;
    if (name == "scale_offset") return DriftKind::scale_offset;
    if (name == "spatial_shift") return DriftKind::spatial_shift;
    if (name == "volatility") return DriftKind::volatility;
    throw ConfigError("unknown drift kind: " + name +
                      " (want none|scale_offset|spatial_shift|volatility)");
}

Tensor<float> drift_apply(const Tensor<float>& frames, const DriftSpec& spec) {
    if (frames.rank() != 3) throw ShapeError("drift_apply: want [N,H,W]");
    const int N = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
    switch (spec.kind) {
        case DriftKind::none:
            return frames.clone();
        case DriftKind::scale_offset: {
            if (spec.alpha == 1.0 && spec.beta == 0.0) return frames.clone();
            Tensor<float> out(frames.shape);
            const float a = static_cast<float>(spec.alpha), b = static_cast<float>(spec.beta);
            for (int64_t i = 0; i < frames.numel(); ++i) out[i] = a * frames[i] + b;
            return out;
        }
        case DriftKind::spatial_shift: {
            if (spec.k >= H || spec.k >= W || spec.k <= -H || spec.k <= -W)
                throw ConfigError("drift: shift magnitude " + std::to_string(spec.k) +
                                  " must be smaller than the frame dims");
            Tensor<float> out(frames.shape);  // zeros
            for (int t = 0; t < N; ++t)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const int si = i - spec.k, sj = j - spec.k;
                        if (si >= 0 && si < H && sj >= 0 && sj < W)
                            out[(static_cast<int64_t>(t) * H + i) * W + j] =
                                frames[(static_cast<int64_t>(t) * H + si) * W + sj];
                    }
            return out;
        }
        case DriftKind::volatility: {
            if (spec.sigma == 0.0) return frames.clone();
            Tensor<float> out(frames.shape);
            Rng rng = Rng::stream(spec.seed, "drift.volatility");
            for (int64_t i = 0; i < frames.numel(); ++i)
                out[i] = frames[i] + static_cast<float>(spec.sigma * rng.normal());
            return out;
        }
    }
    throw ConfigError("drift_apply: unhandled kind");
}

}  // namespace nests6
