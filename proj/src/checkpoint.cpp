#include "emdt/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace emdt {

namespace {

template <typename T>
void append_raw(std::vector<uint8_t>& buf, T v) {
    // Little-endian only; asserted at build time for the supported targets.
    static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}

template <typename T>
T read_raw(const std::vector<uint8_t>& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw IoError("checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

size_t dtype_size(CheckpointEntry::Dtype d) {
    switch (d) {
        case CheckpointEntry::kF32: return 4;
        case CheckpointEntry::kF64: return 8;
        case CheckpointEntry::kU64: return 8;
    }
    throw IoError("checkpoint: unknown dtype tag");
}

template <typename T>
std::vector<uint8_t> to_bytes(const std::vector<T>& v) {
    std::vector<uint8_t> out(v.size() * sizeof(T));
    std::memcpy(out.data(), v.data(), out.size());
    return out;
}

template <typename T>
std::vector<T> from_bytes(const std::vector<uint8_t>& b) {
    std::vector<T> out(b.size() / sizeof(T));
    std::memcpy(out.data(), b.data(), b.size());
    return out;
}

}  // namespace

CheckpointEntry CheckpointEntry::from_f32(std::string name, Shape dims, const std::vector<float>& values) {
    if (numel_of(dims) != static_cast<int64_t>(values.size())) throw IoError("checkpoint: dims/payload mismatch");
    return {std::move(name), kF32, std::move(dims), to_bytes(values)};
}

CheckpointEntry CheckpointEntry::from_f64(std::string name, Shape dims, const std::vector<double>& values) {
    if (numel_of(dims) != static_cast<int64_t>(values.size())) throw IoError("checkpoint: dims/payload mismatch");
    return {std::move(name), kF64, std::move(dims), to_bytes(values)};
}

CheckpointEntry CheckpointEntry::from_u64(std::string name, Shape dims, const std::vector<uint64_t>& values) {
    if (numel_of(dims) != static_cast<int64_t>(values.size())) throw IoError("checkpoint: dims/payload mismatch");
    return {std::move(name), kU64, std::move(dims), to_bytes(values)};
}

std::vector<float> CheckpointEntry::as_f32() const {
    if (dtype == kF32) return from_bytes<float>(payload);
    if (dtype == kF64) {
        auto d = from_bytes<double>(payload);
        return std::vector<float>(d.begin(), d.end());
    }
    throw IoError("checkpoint: entry '" + name + "' is not floating point");
}

std::vector<double> CheckpointEntry::as_f64() const {
    if (dtype == kF64) return from_bytes<double>(payload);
    if (dtype == kF32) {
        auto f = from_bytes<float>(payload);
        return std::vector<double>(f.begin(), f.end());
    }
    throw IoError("checkpoint: entry '" + name + "' is not floating point");
}

std::vector<uint64_t> CheckpointEntry::as_u64() const {
    if (dtype != kU64) throw IoError("checkpoint: entry '" + name + "' is not u64");
    return from_bytes<uint64_t>(payload);
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw IoError("checkpoint: missing entry '" + name + "'");
    return *e;
}

void Checkpoint::save(const std::string& path) const {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), kCheckpointMagic, kCheckpointMagic + 4);
    append_raw<uint32_t>(buf, kCheckpointVersion);
    append_raw<uint32_t>(buf, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        append_raw<uint32_t>(buf, static_cast<uint32_t>(e.name.size()));
        buf.insert(buf.end(), e.name.begin(), e.name.end());
        append_raw<uint32_t>(buf, static_cast<uint32_t>(e.dims.size()));
        for (int64_t d : e.dims) append_raw<uint64_t>(buf, static_cast<uint64_t>(d));
        append_raw<uint8_t>(buf, static_cast<uint8_t>(e.dtype));
        if (e.payload.size() != static_cast<size_t>(e.numel()) * dtype_size(e.dtype))
            throw IoError("checkpoint: entry '" + e.name + "' payload size mismatch");
        append_raw<uint64_t>(buf, static_cast<uint64_t>(e.payload.size()));
        buf.insert(buf.end(), e.payload.begin(), e.payload.end());
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("checkpoint: cannot open '" + tmp + "' for writing");
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!os) throw IoError("checkpoint: short write to '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("checkpoint: rename failed: " + ec.message());
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    size_t off = 0;
    if (buf.size() < 12 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
        throw IoError("checkpoint: bad magic in '" + path + "'");
    off = 4;
    const uint32_t version = read_raw<uint32_t>(buf, off);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported format version " + std::to_string(version));
    const uint32_t count = read_raw<uint32_t>(buf, off);
    Checkpoint ck;
    ck.entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const uint32_t name_len = read_raw<uint32_t>(buf, off);
        if (off + name_len > buf.size()) throw IoError("checkpoint: truncated name");
        e.name.assign(reinterpret_cast<const char*>(buf.data() + off), name_len);
        off += name_len;
        const uint32_t rank = read_raw<uint32_t>(buf, off);
        e.dims.resize(rank);
        for (uint32_t d = 0; d < rank; ++d) e.dims[d] = static_cast<int64_t>(read_raw<uint64_t>(buf, off));
        e.dtype = static_cast<CheckpointEntry::Dtype>(read_raw<uint8_t>(buf, off));
        dtype_size(e.dtype);  // validates the tag
        const uint64_t payload_size = read_raw<uint64_t>(buf, off);
        if (payload_size != static_cast<uint64_t>(e.numel()) * dtype_size(e.dtype))
            throw IoError("checkpoint: entry '" + e.name + "' payload size mismatch");
        if (off + payload_size > buf.size()) throw IoError("checkpoint: truncated payload");
        e.payload.assign(buf.begin() + static_cast<ptrdiff_t>(off), buf.begin() + static_cast<ptrdiff_t>(off + payload_size));
        off += payload_size;
        ck.entries.push_back(std::move(e));
    }
    return ck;
}

}  // namespace emdt
