// Deterministic PRNG used everywhere randomness is needed.
//
// The generator is xoshiro256** seeded through splitmix64. Named substreams
// are derived as xoshiro256**(splitmix64-expand(seed XOR fnv1a64(name))), so
// independent concerns (init, dropout, shuffling, adversarial noise, ...)
// never share draws and a run is reproducible from its 64-bit seed alone.
//
// No hidden state beyond the four state words: normal() recomputes both
// Box-Muller variates and discards the spare, so serializing the state words
// captures the generator exactly.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "mtdnn/common.hpp"

namespace mtdnn {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
  public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    // Named substream: deterministic function of (seed, name).
    static Rng stream(uint64_t seed, std::string_view name) {
        return Rng(seed ^ fnv1a64(name.data(), name.size()));
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Multiply-shift; bias is O(n/2^64).
    int uniform_int(int n) {
        MTDNN_CHECK(n > 0, ContractError, "uniform_int: n must be positive, got " << n);
        return int((static_cast<unsigned __int128>(next_u64()) * uint64_t(n)) >> 64);
    }

    bool bernoulli(double p) { return next_double() < p; }

    // Box-Muller without a cached spare (keeps state = 4 words exactly).
    double normal() {
        const double u1 = 1.0 - next_double();  // (0, 1]
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    template <typename V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(uniform_int(int(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> s_{};
};

}  // namespace mtdnn
