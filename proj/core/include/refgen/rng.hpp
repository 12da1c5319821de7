#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace refgen {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. Normal variates use explicit Box-Muller so that streams
// are reproducible independent of the standard library's distribution
// implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(splitmix64(seed)) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return (next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n).
    uint64_t uniform_index(uint64_t n) {
        return next_u64() % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent stream from (seed, tag, index...). Used for
// per-sample / per-iteration streams so that parallel data preparation and
// reruns stay deterministic.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag));
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag, uint64_t index) {
    return splitmix64(derive_seed(seed, tag) ^ splitmix64(index + 0x51ed270b7a7eULL));
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag, uint64_t a, uint64_t b) {
    return derive_seed(derive_seed(seed, tag, a), tag + 1, b);
}

} // namespace refgen
