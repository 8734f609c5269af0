#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace emdt {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Stateless hash of a small tuple, used where values must be a pure
/// function of their coordinates (dataset rasterization, token hashing).
inline uint64_t hash_mix(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    uint64_t s = a * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull;
    uint64_t h = splitmix64(s);
    s = h ^ (b * 0xd1b54a32d192ed03ull);
    h = splitmix64(s);
    s = h ^ (c * 0x8cb92ba72f3d8dd7ull);
    h = splitmix64(s);
    s = h ^ (d * 0xaef17502108ef2d9ull);
    return splitmix64(s);
}

/// xoshiro256** generator. Chosen over std::mt19937 because the full state
/// is four u64 words, which keeps checkpointed RNG state small and makes
/// resume-exact training straightforward across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : state_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller. Both values of the pair are derived
    /// and one discarded so no hidden state survives between calls; this
    /// keeps checkpointed RNG state exactly the four state words.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    int64_t next_below(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

}  // namespace emdt
