// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

namespace genrep {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// PCG32 stream. Same seed gives a bit-identical draw sequence on every
// platform; normal() uses Box-Muller on raw uniforms, so it carries the
// same guarantee (std::normal_distribution does not).
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) {
        state_ = splitmix64(seed);
        inc_ = (splitmix64(seed ^ (stream + 0xda3e39cb94b95bdbULL)) << 1u) | 1u;
        next_u32();
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    uint64_t next_u64() {
        uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    // [0,1), 24-bit resolution
    double uniform() { return (next_u32() >> 8) * (1.0 / 16777216.0); }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // (0,1) strictly, for log-safe draws
    double uniform_open() { return ((next_u32() >> 8) + 0.5) * (1.0 / 16777216.0); }

    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform_open();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // unbiased integer in [0, n)
    int uniform_int(int n) {
        uint32_t bound = static_cast<uint32_t>(n);
        uint32_t threshold = (-bound) % bound;
        for (;;) {
            uint32_t r = next_u32();
            if (r >= threshold) {
                return static_cast<int>(r % bound);
            }
        }
    }

    // Independent derived stream; used for per-item seeds so parallel
    // generation stays order-independent.
    Rng split(uint64_t stream) const { return Rng(splitmix64(state_ ^ stream), stream); }

private:
    uint64_t state_ = 0;
    uint64_t inc_ = 1;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace genrep
