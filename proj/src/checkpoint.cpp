#include "nests6/checkpoint.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "nests6/error.hpp"

namespace nests6 {

namespace {

constexpr char kMagic[8] = {'N', 'S', 'T', 'S', '6', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

void write_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (!is) throw DataError("checkpoint: truncated");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("checkpoint: truncated");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

std::string format_hexfloat(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 8);
    write_u32(os, kVersion);
    std::string hdr;
    for (const auto& [k, v] : ck.header) hdr += k + "=" + v + "\n";
    write_u32(os, static_cast<uint32_t>(hdr.size()));
    os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    write_u32(os, static_cast<uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        if (name.size() > 0xffff) throw DataError("checkpoint: tensor name too long: " + name);
        write_u16(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        os.put(static_cast<char>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) write_u32(os, static_cast<uint32_t>(t.dim(d)));
        for (int64_t i = 0; i < t.numel(); ++i) {
            uint32_t bits;
            const float f = t[i];
            std::memcpy(&bits, &f, 4);
            write_u32(os, bits);
        }
    }
    if (!os) throw DataError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const uint32_t version = read_u32(is);
    if (version != kVersion)
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    const uint32_t hdr_len = read_u32(is);
    std::string hdr(hdr_len, '\0');
    is.read(hdr.data(), hdr_len);
    if (!is) throw DataError("checkpoint: truncated header block");
    size_t pos = 0;
    while (pos < hdr.size()) {
        const size_t nl = hdr.find('\n', pos);
        const std::string line = hdr.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? hdr.size() : nl + 1;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw DataError("checkpoint: malformed header line: " + line);
        ck.header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const uint32_t count = read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = read_u16(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int rank = is.get();
        if (!is || rank < 0 || rank > 8) throw DataError("checkpoint: bad tensor rank");
        std::vector<int> shape(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d) shape[static_cast<size_t>(d)] = static_cast<int>(read_u32(is));
        Tensor<float> t(shape);
        for (int64_t j = 0; j < t.numel(); ++j) {
            const uint32_t bits = read_u32(is);
            float f;
            std::memcpy(&f, &bits, 4);
            t[j] = f;
        }
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

Checkpoint checkpoint_from_model(NestModel<float>& model, const Normalizer& norm) {
    Checkpoint ck;
    const ModelConfig& c = model.cfg;
    ck.header["channels"] = std::to_string(c.channels);
    ck.header["state_dim"] = std::to_string(c.state_dim);
    ck.header["n_blocks"] = std::to_string(c.n_blocks);
    ck.header["window_size"] = std::to_string(c.resolved_window());
    ck.header["low_rank"] = std::to_string(c.low_rank);
    ck.header["patch_h"] = std::to_string(c.patch_h);
    ck.header["patch_w"] = std::to_string(c.patch_w);
    ck.header["t_window"] = std::to_string(c.t_window);
    ck.header["use_memory"] = c.use_memory ? "1" : "0";
    ck.header["norm_mean"] = format_hexfloat(norm.mean);
    ck.header["norm_std"] = format_hexfloat(norm.std);
    for (auto& [name, p] : model.named_params()) ck.tensors.emplace_back(name, p->clone());
    return ck;
}

ModelConfig config_from_header(const std::map<std::string, std::string>& header) {
    auto geti = [&](const std::string& key) {
        auto it = header.find(key);
        if (it == header.end()) throw DataError("checkpoint: header missing key " + key);
        return std::stoi(it->second);
    };
    ModelConfig c;
    c.channels = geti("channels");
    c.state_dim = geti("state_dim");
    c.n_blocks = geti("n_blocks");
    c.window_size = geti("window_size");
    c.low_rank = geti("low_rank");
    c.patch_h = geti("patch_h");
    c.patch_w = geti("patch_w");
    c.t_window = geti("t_window");
    c.use_memory = geti("use_memory") != 0;
    return c;
}

void model_from_checkpoint(const Checkpoint& ck, NestModel<float>& model_out, Normalizer& norm_out) {
    const ModelConfig c = config_from_header(ck.header);
    model_out = NestModel<float>(c, Rng(0));
    auto getd = [&](const std::string& key) {
        auto it = ck.header.find(key);
        if (it == ck.header.end()) throw DataError("checkpoint: header missing key " + key);
        return std::strtod(it->second.c_str(), nullptr);
    };
    norm_out.mean = getd("norm_mean");
    norm_out.std = getd("norm_std");
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, t] : ck.tensors) by_name[name] = &t;
    for (auto& [name, p] : model_out.named_params()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint: missing tensor " + name);
        if (it->second->shape != p->shape)
            throw DataError("checkpoint: shape mismatch for " + name + ": file has " +
                            it->second->shape_str() + ", model wants " + p->shape_str());
        *p = it->second->clone();
    }
}

uint64_t file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("file_hash: cannot open: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (n < static_cast<std::streamsize>(sizeof(buf))) break;
    }
    return h;
}

}  // namespace nests6
