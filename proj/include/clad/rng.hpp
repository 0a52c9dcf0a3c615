#pragma once

#include <cstdint>
#include <vector>

namespace clad {

// SplitMix64, used only to expand a user seed into xoshiro state.
class SplitMix64 {
  public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

  private:
    uint64_t state_;
};

// xoshiro256** seeded via SplitMix64. All randomness in the project flows
// through this generator so runs are bit-reproducible across platforms.
class Xoshiro256ss {
  public:
    explicit Xoshiro256ss(uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& word : state_) word = sm.next();
    }

    uint64_t next() {
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

    // Uniform double in [0, 1), 53-bit resolution.
    double next_double() {
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + next_double() * (hi - lo);
    }

    // Uniform integer in [0, n) without modulo bias (Lemire reduction).
    uint64_t bounded(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    // In-place Fisher-Yates shuffle.
    template <typename Seq>
    void shuffle(Seq& seq) {
        for (size_t i = seq.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(bounded(i));
            std::swap(seq[i - 1], seq[j]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t state_[4];
};

}  // namespace clad
