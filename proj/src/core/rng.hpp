#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace epimerge {

// Deterministic random helpers. std::shuffle and the std distributions are
// implementation-defined, so everything that must reproduce byte-for-byte
// across toolchains is spelled out here on top of mt19937_64 draws.
class rng {
public:
    explicit rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double next_double() {
        return (gen_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) {
        // modulo rejection to stay unbiased
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do { x = gen_(); } while (x >= limit);
        return x % n;
    }

    // standard normal via Box-Muller (one value per call, spare cached)
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = next_double(); } while (u1 <= 0.0);
        u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_     = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Fisher-Yates, explicit so the permutation is toolchain independent
    template <typename T>
    void shuffle(std::vector<T> & v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<size_t> permutation(size_t n) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        return idx;
    }

private:
    std::mt19937_64 gen_;
    double spare_      = 0.0;
    bool   has_spare_  = false;
};

} // namespace epimerge
