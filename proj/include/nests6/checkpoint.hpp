#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nests6/data.hpp"
#include "nests6/model.hpp"
#include "nests6/tensor.hpp"

namespace nests6 {

// Checkpoint file: little-endian, magic "NSTS6CKP", u32 version = 1, then a
// self-describing UTF-8 "key=value\n" block (u32 length prefix), u32 tensor
// count, and per tensor: u16 name length, name bytes, u8 rank, u32 extents,
// raw float32 data. Round-trips are bit-exact.
struct Checkpoint {
    std::map<std::string, std::string> header;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Model + normalizer <-> checkpoint glue. Hyperparameters live in the header
// so a checkpoint is self-describing; the normalizer statistics are stored as
// hexfloats for exact round-trips.
Checkpoint checkpoint_from_model(NestModel<float>& model, const Normalizer& norm);
void model_from_checkpoint(const Checkpoint& ck, NestModel<float>& model_out, Normalizer& norm_out);
ModelConfig config_from_header(const std::map<std::string, std::string>& header);

uint64_t file_hash(const std::string& path);

}  // namespace nests6
