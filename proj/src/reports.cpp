#include "nests6/reports.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "nests6/error.hpp"

namespace nests6 {

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("report: cannot open for writing: " + path);
    os << "run_id,split,horizon,drift_kind,memory,mae,rmse,n\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%d,%s,%s,%.9g,%.9g,%lld\n", r.run_id.c_str(),
                      r.split.c_str(), r.horizon, drift_kind_name(r.drift),
                      r.memory ? "on" : "off", r.mae, r.rmse, static_cast<long long>(r.n));
        os << buf;
    }
}

void write_pgm16(const Tensor<float>& map, const std::string& path) {
    if (map.rank() != 2) throw ShapeError("pgm: want [H,W], got " + map.shape_str());
    float maxv = 0.0f;
    for (int64_t i = 0; i < map.numel(); ++i) maxv = std::max(maxv, map[i]);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("pgm: cannot open for writing: " + path);
    os << "P5\n" << map.dim(1) << " " << map.dim(0) << "\n65535\n";
    for (int64_t i = 0; i < map.numel(); ++i) {
        const double unit = maxv > 0 ? static_cast<double>(map[i]) / maxv : 0.0;
        const uint16_t v = static_cast<uint16_t>(std::lround(unit * 65535.0));
        os.put(static_cast<char>(v >> 8));
        os.put(static_cast<char>(v & 0xff));
    }
    std::ofstream sidecar(path + ".max.txt", std::ios::trunc);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g\n", static_cast<double>(maxv));
    sidecar << buf;
}

}  // namespace nests6
