#pragma once

#include <cstdint>
#include <string_view>

namespace cm {

// FNV-1a 64-bit hash, used to derive per-layer / per-expert RNG streams and
// hashed token features from names. Stable across platforms.
constexpr uint64_t fnv1a64(std::string_view s, uint64_t basis = 0xcbf29ce484222325ull) {
    uint64_t h = basis;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// splitmix64. Every randomized operation in the toolkit owns a private
// stream seeded from (seed ^ fnv1a64(name) ^ index), so results do not
// depend on scheduling or iteration order.
struct SplitMix64 {
    uint64_t state = 0;

    SplitMix64() = default;
    explicit constexpr SplitMix64(uint64_t seed) : state(seed) {}

    constexpr uint64_t next() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return double(next() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, bound); bound must be nonzero. Modulo bias is
    // below 2^-50 for any bound this toolkit uses.
    uint64_t below(uint64_t bound) { return next() % bound; }
};

// One-shot avalanche of a 64-bit value (the splitmix64 finalizer).
constexpr uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace cm
