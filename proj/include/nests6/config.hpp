#pragma once

#include <map>
#include <set>
#include <string>

#include "nests6/data.hpp"
#include "nests6/model.hpp"
#include "nests6/train.hpp"

namespace nests6 {

// Declarative run configuration: flat "key = value" text with [section]
// headers and '#' comments. Every key has a documented default; unknown keys
// are hard errors.
struct RunConfig {
    // [run]
    std::string run_id = "run0";
    uint64_t seed = 1;
    std::string out_dir = "out";
    int workers = 1;

    // [data]
    std::string source = "synth";  // synth | file
    std::string data_path;
    SynthConfig synth;
    double train_frac = 0.7;
    double val_frac = 0.1;

    // [model]
    ModelConfig model;

    // [train]
    TrainConfig train;

    // [eval]
    int horizon = 1;
    DriftSpec drift;

    // keys explicitly present in the parsed file
    std::set<std::string> explicit_keys;

    bool model_section_explicit() const {
        for (const auto& k : explicit_keys)
            if (k.rfind("model.", 0) == 0) return true;
        return false;
    }

    static RunConfig parse_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);

    // derived views
    SynthConfig synth_config() const;
    TrainConfig train_config() const;

    GridSeries load_or_generate() const;
};

}  // namespace nests6
