#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace aimv2 {

// CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320). Used for checkpoint
// integrity and frozen-parameter checksums.
inline uint32_t crc32_update(uint32_t crc, const void* bytes, size_t len) {
    static const auto table = [] {
        struct Table { uint32_t v[256]; };
        Table t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1u) ? (0xEDB88320u ^ (c >> 1)) : (c >> 1);
            }
            t.v[i] = c;
        }
        return t;
    }();
    const auto* p = static_cast<const unsigned char*>(bytes);
    crc = ~crc;
    for (size_t i = 0; i < len; ++i) {
        crc = table.v[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    }
    return ~crc;
}

inline uint32_t crc32(const void* bytes, size_t len) {
    return crc32_update(0, bytes, len);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// SplitMix64 finalizer; combines a seed with a stream index so every
// consumer of randomness (init, per-step batches, per-sample scenes) gets
// an independent deterministic stream.
inline uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 0x632BE59BD9B4E019ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) {
    return mix64(mix64(a, b), c);
}

} // namespace aimv2
