// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace flowcast {

// Deterministic, splittable random stream. All randomness in the library goes
// through this type so a run is reproducible from a single seed regardless of
// the standard library's distribution implementations.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : state_(seed) {
        // Warm up so nearby seeds diverge immediately.
        next_u64();
        next_u64();
    }

    // Independent child stream derived from a label (e.g. one per parameter).
    RngStream fork(std::string_view label) const {
        return RngStream(splitmix(state_ ^ fnv1a(label)));
    }
    RngStream fork(uint64_t salt) const { return RngStream(splitmix(state_ ^ splitmix(salt ^ 0x9e3779b97f4a7c15ull))); }

    uint64_t next_u64() {
        state_ = splitmix(state_);
        return state_;
    }

    // Uniform in [0, 1) with 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller with a cached spare.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    // Uniform integer in [0, n) by rejection; n > 0.
    uint64_t below(uint64_t n) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace flowcast
