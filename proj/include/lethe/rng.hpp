#pragma once

// Portable deterministic RNG. std::mt19937 + distributions are not guaranteed
// to produce identical streams across standard libraries, so seeding, shuffles
// and gaussian draws are hand-rolled on top of SplitMix64.

#include <cmath>
#include <cstdint>
#include <vector>

namespace lethe {

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [0, bound) without modulo bias.
    std::uint64_t next_below(std::uint64_t bound) {
        const std::uint64_t threshold = (0ULL - bound) % bound;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Standard normal via Box-Muller, one cached spare.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double two_pi = 6.283185307179586;
        double u = 1.0 - next_double();
        double angle = two_pi * next_double();
        double mag = std::sqrt(-2.0 * std::log(u));
        spare_ = mag * std::sin(angle);
        has_spare_ = true;
        return mag * std::cos(angle);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        if (v.size() <= 1) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Mixes a stream tag into a seed so derived streams are independent.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    SplitMix64 rng(seed ^ (tag * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL));
    return rng.next_u64();
}

} // namespace lethe
