#pragma once

#include <string>
#include <vector>

#include "nests6/eval.hpp"
#include "nests6/tensor.hpp"

namespace nests6 {

struct ReportRow {
    std::string run_id;
    std::string split;
    int horizon = 1;
    DriftKind drift = DriftKind::none;
    bool memory = true;
    double mae = 0.0;
    double rmse = 0.0;
    int64_t n = 0;
};

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path);

// 16-bit binary PGM (P5, big-endian samples), values linearly mapped from
// [0, max_value]; max_value is written to a sidecar text file.
void write_pgm16(const Tensor<float>& map, const std::string& path);

}  // namespace nests6
