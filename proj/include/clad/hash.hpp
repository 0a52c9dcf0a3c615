#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace clad {

// FNV-1a 64-bit, used for config hashes and parameter checksums.
inline uint64_t fnv1a64(const void* bytes, size_t n,
                        uint64_t seed = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x00000100000001B3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

// Checksum of float tensors as little-endian IEEE-754 bytes.
inline uint64_t checksum_floats(const std::vector<float>& values,
                                uint64_t running = 0xCBF29CE484222325ULL) {
    static_assert(sizeof(float) == 4);
    return fnv1a64(values.data(), values.size() * sizeof(float), running);
}

inline std::string hex64(uint64_t value) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[value & 0xF];
        value >>= 4;
    }
    return out;
}

}  // namespace clad
