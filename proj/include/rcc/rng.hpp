#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "rcc/common.hpp"

namespace rcc {

// Deterministic RNG used everywhere in the library. Wraps mt19937_64 (whose
// output sequence is pinned by the standard) and hand-rolls the distributions
// so results do not depend on the standard library implementation.
class Rng {
 public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, n). Modulo bias is below 2^-32 for any n < 2^32.
    std::uint64_t uniform_u64(std::uint64_t n) {
        if (n == 0) throw ParamError("uniform_u64: n must be positive");
        return engine_() % n;
    }

    int uniform_int(int lo, int hi_inclusive) {
        if (hi_inclusive < lo) throw ParamError("uniform_int: empty range");
        return lo + static_cast<int>(uniform_u64(
                        static_cast<std::uint64_t>(hi_inclusive - lo) + 1));
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    bool coin() { return (engine_() & 1ull) != 0; }

    // Box-Muller; one value per call, spare cached.
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = uniform_u64(i);
            std::swap(first[i - 1], first[j]);
        }
    }

 private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable seed derivation: every consumer of randomness gets its own stream
// derived from the single top-level seed plus a label and indices. SplitMix64
// finalizer keeps streams decorrelated.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = root ^ 0x9e3779b97f4a7c15ull;
    auto mix = [&h](std::uint64_t v) {
        h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        std::uint64_t z = h;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        h = z ^ (z >> 31);
    };
    for (char c : label) mix(static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    mix(a);
    mix(b);
    return h;
}

}  // namespace rcc
