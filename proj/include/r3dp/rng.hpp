#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace r3dp {

// Deterministic RNG. mt19937_64 supplies the bit stream (its output is pinned
// by the standard); the value transforms are hand-rolled because the standard
// library distributions are implementation-defined and would break
// cross-toolchain reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] by rejection (unbiased).
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % span);
    }

    // Box-Muller, one value per call (the spare is kept).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a over a label, mixed with the parent seed. Used to fan a master seed
// out into independent named streams (data, init, training, eval, ...).
inline uint64_t derive_seed(uint64_t parent, std::string_view label) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    mix(parent);
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer to spread low-entropy labels
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

inline uint64_t derive_seed(uint64_t parent, std::string_view label, uint64_t index) {
    return derive_seed(derive_seed(parent, label), std::to_string(index));
}

}  // namespace r3dp
