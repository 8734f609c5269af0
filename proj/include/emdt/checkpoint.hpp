#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "emdt/common.hpp"

namespace emdt {

/// On-disk tensor entry. Payload bytes are little-endian scalars in the
/// entry's dtype. See docs/formats.md for the exact byte layout.
struct CheckpointEntry {
    enum Dtype : uint8_t { kF32 = 0, kF64 = 1, kU64 = 2 };

    std::string name;
    Dtype dtype = kF64;
    Shape dims;
    std::vector<uint8_t> payload;

    int64_t numel() const { return numel_of(dims); }

    static CheckpointEntry from_f32(std::string name, Shape dims, const std::vector<float>& values);
    static CheckpointEntry from_f64(std::string name, Shape dims, const std::vector<double>& values);
    static CheckpointEntry from_u64(std::string name, Shape dims, const std::vector<uint64_t>& values);

    std::vector<float> as_f32() const;
    std::vector<double> as_f64() const;
    std::vector<uint64_t> as_u64() const;
};

struct Checkpoint {
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const;
    const CheckpointEntry& at(const std::string& name) const;

    /// Atomic write: serializes to <path>.tmp then renames.
    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

inline constexpr char kCheckpointMagic[4] = {'E', 'M', 'D', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

}  // namespace emdt
