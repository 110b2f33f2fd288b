#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "aimv2/hashing.hpp"

namespace aimv2 {

// xoshiro256++ with splitmix64 seeding. Hand-rolled so that every draw is
// bit-identical across platforms and standard-library versions; replay
// determinism is part of the artifact's contract.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t z = seed;
        for (auto& word : state_) {
            z += 0x9E3779B97F4A7C15ULL;
            uint64_t s = z;
            s = (s ^ (s >> 30)) * 0xBF58476D1CE4E5B9ULL;
            s = (s ^ (s >> 27)) * 0x94D049BB133111EBULL;
            word = s ^ (s >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform01();
    }

    // Inclusive [lo, hi], unbiased via 128-bit multiply.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (lo > hi) {
            throw std::invalid_argument("uniform_int: lo > hi");
        }
        const uint64_t range = static_cast<uint64_t>(hi - lo) + 1u;
        if (range == 0) { // full 64-bit range
            return static_cast<int64_t>(next_u64());
        }
        const auto wide = static_cast<unsigned __int128>(next_u64()) * range;
        return lo + static_cast<int64_t>(static_cast<uint64_t>(wide >> 64));
    }

    // Standard normal via Box-Muller; the spare value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform01(); // (0, 1], keeps log finite
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Rejection sampling from the standard normal (acceptance ~68% for
    // the [-1, 1] window used by the batch planner).
    double truncated_normal(double lo, double hi) {
        for (;;) {
            const double z = normal();
            if (z >= lo && z <= hi) {
                return z;
            }
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace aimv2
