#pragma once

// Checkpoint files: "DSQA" magic, format version, the run config text, the
// global step, the training rng stream, then every parameter with its Adam
// moments, sorted by name. All integers and floats are little-endian; see
// README for the byte layout. save -> load -> save is byte-identical, and a
// load that doesn't match the model's parameters fails before touching them.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dsqa/common.hpp"
#include "dsqa/optim.hpp"
#include "dsqa/rng.hpp"

namespace dsqa {

constexpr std::uint32_t checkpoint_version = 1;

struct CheckpointMeta {
    std::string config_text;
    std::int64_t step = 0;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_position = 0;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
public:
    ByteReader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void f32_block(float* dst, std::size_t n) {
        need(4 * n);
        for (std::size_t i = 0; i < n; ++i) dst[i] = f32();
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    unsigned char byte() { return static_cast<unsigned char>(bytes_[pos_++]); }
    void need(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw DataError("checkpoint: truncated file " + path_);
    }

    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

inline std::vector<const Parameter*> sorted_params(const ParamStore& store) {
    std::vector<const Parameter*> order;
    for (const auto& p : store.all()) order.push_back(p.get());
    std::sort(order.begin(), order.end(),
              [](const Parameter* a, const Parameter* b) { return a->name < b->name; });
    return order;
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const std::string& config_text, std::int64_t step,
                            const RngState& rng, const ParamStore& store) {
    std::string out;
    out.reserve(64 + config_text.size() + store.total_size() * 12);
    out += "DSQA";
    detail::put_u32(out, checkpoint_version);
    detail::put_u64(out, config_text.size());
    out += config_text;
    detail::put_u64(out, static_cast<std::uint64_t>(step));
    detail::put_u64(out, rng.seed());
    detail::put_u64(out, rng.position());

    const auto order = detail::sorted_params(store);
    detail::put_u32(out, static_cast<std::uint32_t>(order.size()));
    for (const Parameter* p : order) {
        detail::put_u32(out, static_cast<std::uint32_t>(p->name.size()));
        out += p->name;
        detail::put_u32(out, static_cast<std::uint32_t>(p->array.ndim()));
        for (int d = 0; d < p->array.ndim(); ++d) detail::put_u32(out, static_cast<std::uint32_t>(p->array.dim(d)));
        for (std::size_t i = 0; i < p->array.size(); ++i) detail::put_f32(out, p->array.data()[i]);
        for (float v : p->m) detail::put_f32(out, v);
        for (float v : p->v) detail::put_f32(out, v);
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("checkpoint: cannot write " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw DataError("checkpoint: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("checkpoint: cannot move " + tmp + " to " + path);
}

// Header only: enough to rebuild the model before loading parameters.
inline CheckpointMeta read_checkpoint_meta(const std::string& path) {
    const std::string bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes, path);
    if (r.str(4) != "DSQA") throw DataError("checkpoint: bad magic in " + path);
    const std::uint32_t version = r.u32();
    if (version != checkpoint_version)
        throw DataError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
    CheckpointMeta meta;
    meta.config_text = r.str(static_cast<std::size_t>(r.u64()));
    meta.step = static_cast<std::int64_t>(r.u64());
    meta.rng_seed = r.u64();
    meta.rng_position = r.u64();
    return meta;
}

// Loads every tensor into an already-constructed store. The full file is
// parsed and validated against the store before any parameter changes, so a
// mismatch leaves the model untouched.
inline CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store) {
    const std::string bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes, path);
    if (r.str(4) != "DSQA") throw DataError("checkpoint: bad magic in " + path);
    const std::uint32_t version = r.u32();
    if (version != checkpoint_version)
        throw DataError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
    CheckpointMeta meta;
    meta.config_text = r.str(static_cast<std::size_t>(r.u64()));
    meta.step = static_cast<std::int64_t>(r.u64());
    meta.rng_seed = r.u64();
    meta.rng_position = r.u64();

    struct Record {
        Parameter* target;
        std::vector<float> values, m, v;
    };
    const std::uint32_t count = r.u32();
    if (count != store.all().size())
        throw ConfigError("checkpoint: holds " + std::to_string(count) + " parameters, model has " +
                          std::to_string(store.all().size()));
    std::vector<Record> records;
    records.reserve(count);
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str(r.u32());
        if (!seen.insert(name).second) throw DataError("checkpoint: parameter '" + name + "' appears twice");
        if (!store.has(name)) throw ConfigError("checkpoint: model has no parameter '" + name + "'");
        Parameter& p = store.at(name);
        const std::uint32_t ndim = r.u32();
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        if (shape != p.array.shape())
            throw ConfigError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                              ", model expects " + shape_str(p.array.shape()));
        Record rec;
        rec.target = &p;
        rec.values.resize(p.array.size());
        rec.m.resize(p.array.size());
        rec.v.resize(p.array.size());
        r.f32_block(rec.values.data(), rec.values.size());
        r.f32_block(rec.m.data(), rec.m.size());
        r.f32_block(rec.v.data(), rec.v.size());
        records.push_back(std::move(rec));
    }
    if (!r.done()) throw DataError("checkpoint: trailing bytes in " + path);

    for (Record& rec : records) {
        std::copy(rec.values.begin(), rec.values.end(), rec.target->array.data());
        rec.target->m = std::move(rec.m);
        rec.target->v = std::move(rec.v);
    }
    return meta;
}

} // namespace dsqa
