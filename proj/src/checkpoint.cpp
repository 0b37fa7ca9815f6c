#include "lodet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_set>

namespace lodet::nn {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'C', 'K'};

void put_u32(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v & 0xffffffffull));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}

void put_f32(std::ostream& os, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t get_u64(std::istream& is) {
    uint64_t lo = get_u32(is);
    uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

float get_f32(std::istream& is) {
    uint32_t bits = get_u32(is);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

std::string get_string(std::istream& is) {
    uint32_t len = get_u32(is);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw IoError("checkpoint: truncated string");
    return s;
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, ckpt.version);
    if (ckpt.version == kCheckpointVersionAdapter) {
        if (!ckpt.adapter) throw ContractError("adapter checkpoint requires a header");
        put_u32(os, ckpt.adapter->rank);
        put_f32(os, ckpt.adapter->alpha);
        put_u32(os, static_cast<uint32_t>(ckpt.adapter->selector.size()));
        os.write(ckpt.adapter->selector.data(),
                 static_cast<std::streamsize>(ckpt.adapter->selector.size()));
    }
    put_u64(os, ckpt.records.size());
    for (const auto& rec : ckpt.records) {
        check_finite(rec.data, "checkpoint record");
        if (static_cast<int64_t>(rec.data.size()) != numel_of(rec.shape)) {
            throw ShapeError("checkpoint record '" + rec.name + "': data does not match shape " +
                             shape_str(rec.shape));
        }
        put_u32(os, static_cast<uint32_t>(rec.name.size()));
        os.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
        put_u32(os, static_cast<uint32_t>(rec.shape.size()));
        for (int d : rec.shape) put_u64(os, static_cast<uint64_t>(d));
        for (float f : rec.data) put_f32(os, f);
    }
    if (!os) throw IoError("write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("not a checkpoint file: " + path);
    }
    Checkpoint ckpt;
    ckpt.version = get_u32(is);
    if (ckpt.version != kCheckpointVersionFull && ckpt.version != kCheckpointVersionAdapter) {
        throw ParseError("unsupported checkpoint version " + std::to_string(ckpt.version));
    }
    if (ckpt.version == kCheckpointVersionAdapter) {
        AdapterHeader hdr;
        hdr.rank = get_u32(is);
        hdr.alpha = get_f32(is);
        hdr.selector = get_string(is);
        ckpt.adapter = hdr;
    }
    uint64_t count = get_u64(is);
    ckpt.records.reserve(count);
    for (uint64_t r = 0; r < count; ++r) {
        CheckpointRecord rec;
        rec.name = get_string(is);
        uint32_t rank = get_u32(is);
        int64_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            uint64_t dim = get_u64(is);
            rec.shape.push_back(static_cast<int>(dim));
            n *= static_cast<int64_t>(dim);
        }
        rec.data.resize(static_cast<size_t>(n));
        for (auto& f : rec.data) f = get_f32(is);
        ckpt.records.push_back(std::move(rec));
    }
    return ckpt;
}

void save_model(const std::string& path, const Model& model) {
    Checkpoint ckpt;
    for (const Parameter* p : model.parameters()) {
        CheckpointRecord rec;
        rec.name = p->name();
        rec.shape = p->tensor().shape();
        auto v = p->tensor().value();
        rec.data.assign(v.begin(), v.end());
        ckpt.records.push_back(std::move(rec));
    }
    write_checkpoint(path, ckpt);
}

void load_model(const std::string& path, Model& model) {
    Checkpoint ckpt = read_checkpoint(path);
    std::unordered_set<std::string> seen;
    for (const auto& rec : ckpt.records) {
        Parameter* p = model.find(rec.name);
        if (!p) throw IntegrityError("checkpoint record '" + rec.name + "' has no model parameter");
        if (p->tensor().shape() != rec.shape) {
            throw ShapeError("checkpoint record '" + rec.name + "' shape " + shape_str(rec.shape) +
                             " does not match parameter " + shape_str(p->tensor().shape()));
        }
        auto w = p->tensor().value_mut();
        std::copy(rec.data.begin(), rec.data.end(), w.begin());
        p->tensor().zero_grad();
        seen.insert(rec.name);
    }
    for (const Parameter* p : model.parameters()) {
        if (!seen.count(p->name())) {
            throw IntegrityError("checkpoint missing parameter '" + p->name() + "'");
        }
    }
}

}  // namespace lodet::nn
