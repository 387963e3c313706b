#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace spectdiff {

// Counter-based RNG. Every stream is keyed by (seed, purpose tag, index),
// so draws are independent of evaluation order and thread scheduling.

inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_tag(std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
    for (char c : tag) {
        h ^= uint8_t(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t stream_key(uint64_t seed, std::string_view tag, uint64_t index) {
    uint64_t k = mix64(seed ^ 0x6a09e667f3bcc909ULL);
    k = mix64(k ^ hash_tag(tag));
    k = mix64(k ^ index);
    return k;
}

class RngStream {
public:
    RngStream(uint64_t seed, std::string_view tag, uint64_t index = 0)
        : state_(stream_key(seed, tag, index)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in (0, 1): never returns exactly 0, safe for log().
    double next_uniform() {
        return (double(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    double next_gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Poisson draw via Knuth's product method, chunked so exp(-chunk)
    /// stays well inside double range for large means.
    uint64_t next_poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        uint64_t total = 0;
        while (lambda > 0.0) {
            const double chunk = lambda > 60.0 ? 60.0 : lambda;
            lambda -= chunk;
            const double limit = std::exp(-chunk);
            double prod = 1.0;
            uint64_t k = 0;
            do {
                prod *= next_uniform();
                ++k;
            } while (prod > limit);
            total += k - 1;
        }
        return total;
    }

    uint64_t next_binomial(uint64_t n, double p) {
        if (p <= 0.0) return 0;
        if (p >= 1.0) return n;
        uint64_t k = 0;
        for (uint64_t i = 0; i < n; ++i)
            if (next_uniform() < p) ++k;
        return k;
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace spectdiff
