#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lodet/nn.hpp"

namespace lodet::nn {

// Checkpoint container. Little-endian layout:
//   magic "LDCK" | u32 version | u64 record count | records...
// record: u32 name length | name bytes | u32 rank | u64 dims[rank] | f32 data
// Version 1 is the plain tensor container; version 2 prefixes the record list
// with an adapter header (u32 rank | f32 alpha | u32 len | selector bytes).
// Round trips are bit-exact.

inline constexpr uint32_t kCheckpointVersionFull = 1;
inline constexpr uint32_t kCheckpointVersionAdapter = 2;

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct AdapterHeader {
    uint32_t rank = 0;
    float alpha = 0.0f;
    std::string selector;
};

struct Checkpoint {
    uint32_t version = kCheckpointVersionFull;
    std::optional<AdapterHeader> adapter;
    std::vector<CheckpointRecord> records;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

// Snapshot every parameter of the model, names preserved. Values must be
// finite; NumericError otherwise.
void save_model(const std::string& path, const Model& model);

// Restore parameter values in place by name. Every record must resolve to a
// parameter of identical shape and every model parameter must be covered.
void load_model(const std::string& path, Model& model);

}  // namespace lodet::nn
