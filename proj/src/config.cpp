#include "nests6/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "nests6/error.hpp"

namespace nests6 {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "run.run_id",        "run.seed",
        "run.out_dir",       "run.workers",
        "data.source",       "data.path",
        "data.H",            "data.W",
        "data.N",            "data.diurnal_period_steps",
        "data.n_hotspots",   "data.diffusion_coefficient",
        "data.noise_std",    "data.train_frac",
        "data.val_frac",     "model.channels",
        "model.state_dim",   "model.n_blocks",
        "model.window_size", "model.low_rank",
        "model.patch_h",     "model.patch_w",
        "model.t_window",    "model.use_memory",
        "train.epochs",      "train.batch_size",
        "train.lr",          "train.laplacian_weight",
        "train.smooth_l1_beta", "train.grad_clip_norm",
        "train.patience",    "eval.horizon",
        "eval.drift",        "eval.drift_alpha",
        "eval.drift_beta",   "eval.drift_k",
        "eval.drift_sigma",
    };
    return keys;
}

int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config: key " + key + " wants an integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config: key " + key + " wants a number, got '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("config: key " + key + " wants an unsigned integer, got '" + v + "'");
    }
}

}  // namespace

RunConfig RunConfig::parse_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config: malformed section at line " + std::to_string(lineno));
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected 'key = value' at line " + std::to_string(lineno));
        const std::string key = (section.empty() ? "" : section + ".") + trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (!known_keys().count(key))
            throw ConfigError("config: unknown key '" + key + "' at line " + std::to_string(lineno));
        kv[key] = value;
    }

    RunConfig c;
    for (const auto& [k, v] : kv) c.explicit_keys.insert(k);
    auto get = [&](const std::string& key) -> const std::string* {
        auto it = kv.find(key);
        return it == kv.end() ? nullptr : &it->second;
    };
    if (auto* v = get("run.run_id")) c.run_id = *v;
    if (auto* v = get("run.seed")) c.seed = to_u64("run.seed", *v);
    if (auto* v = get("run.out_dir")) c.out_dir = *v;
    if (auto* v = get("run.workers")) c.workers = to_int("run.workers", *v);
    if (auto* v = get("data.source")) c.source = *v;
    if (auto* v = get("data.path")) c.data_path = *v;
    if (auto* v = get("data.H")) c.synth.H = to_int("data.H", *v);
    if (auto* v = get("data.W")) c.synth.W = to_int("data.W", *v);
    if (auto* v = get("data.N")) c.synth.N = to_int("data.N", *v);
    if (auto* v = get("data.diurnal_period_steps"))
        c.synth.diurnal_period_steps = to_int("data.diurnal_period_steps", *v);
    if (auto* v = get("data.n_hotspots")) c.synth.n_hotspots = to_int("data.n_hotspots", *v);
    if (auto* v = get("data.diffusion_coefficient"))
        c.synth.diffusion_coefficient = to_double("data.diffusion_coefficient", *v);
    if (auto* v = get("data.noise_std")) c.synth.noise_std = to_double("data.noise_std", *v);
    if (auto* v = get("data.train_frac")) c.train_frac = to_double("data.train_frac", *v);
    if (auto* v = get("data.val_frac")) c.val_frac = to_double("data.val_frac", *v);
    if (auto* v = get("model.channels")) c.model.channels = to_int("model.channels", *v);
    if (auto* v = get("model.state_dim")) c.model.state_dim = to_int("model.state_dim", *v);
    if (auto* v = get("model.n_blocks")) c.model.n_blocks = to_int("model.n_blocks", *v);
    if (auto* v = get("model.window_size")) c.model.window_size = to_int("model.window_size", *v);
    if (auto* v = get("model.low_rank")) c.model.low_rank = to_int("model.low_rank", *v);
    if (auto* v = get("model.patch_h")) c.model.patch_h = to_int("model.patch_h", *v);
    if (auto* v = get("model.patch_w")) c.model.patch_w = to_int("model.patch_w", *v);
    if (auto* v = get("model.t_window")) c.model.t_window = to_int("model.t_window", *v);
    if (auto* v = get("model.use_memory")) c.model.use_memory = to_int("model.use_memory", *v) != 0;
    if (auto* v = get("train.epochs")) c.train.epochs = to_int("train.epochs", *v);
    if (auto* v = get("train.batch_size")) c.train.batch_size = to_int("train.batch_size", *v);
    if (auto* v = get("train.lr")) c.train.lr = to_double("train.lr", *v);
    if (auto* v = get("train.laplacian_weight"))
        c.train.laplacian_weight = to_double("train.laplacian_weight", *v);
    if (auto* v = get("train.smooth_l1_beta"))
        c.train.smooth_l1_beta = to_double("train.smooth_l1_beta", *v);
    if (auto* v = get("train.grad_clip_norm"))
        c.train.grad_clip_norm = to_double("train.grad_clip_norm", *v);
    if (auto* v = get("train.patience")) c.train.patience = to_int("train.patience", *v);
    if (auto* v = get("eval.horizon")) c.horizon = to_int("eval.horizon", *v);
    if (auto* v = get("eval.drift")) c.drift.kind = drift_kind_from_name(*v);
    if (auto* v = get("eval.drift_alpha")) c.drift.alpha = to_double("eval.drift_alpha", *v);
    if (auto* v = get("eval.drift_beta")) c.drift.beta = to_double("eval.drift_beta", *v);
    if (auto* v = get("eval.drift_k")) c.drift.k = to_int("eval.drift_k", *v);
    if (auto* v = get("eval.drift_sigma")) c.drift.sigma = to_double("eval.drift_sigma", *v);

    if (c.source != "synth" && c.source != "file")
        throw ConfigError("config: data.source must be synth or file, got '" + c.source + "'");
    if (c.source == "file" && c.data_path.empty())
        throw ConfigError("config: data.source=file requires data.path");
    if (const char* env = std::getenv("NSTS6_OUT")) c.out_dir = env;
    c.synth.seed = c.seed;
    c.drift.seed = c.seed;
    return c;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_text(ss.str());
}

SynthConfig RunConfig::synth_config() const { return synth; }

TrainConfig RunConfig::train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    t.workers = workers;
    t.split.train_frac = train_frac;
    t.split.val_frac = val_frac;
    return t;
}

GridSeries RunConfig::load_or_generate() const {
    if (source == "file") return load_series(data_path);
    return synth_generate(synth_config());
}

}  // namespace nests6
