#pragma once

#include <cmath>
#include <cstdint>

namespace vesselnet {

// Counter-based generator: draw i from stream k is hash(k, i), so identical
// seeds replay identical sequences regardless of what other streams did.
// split() derives an independent child stream; the hierarchy used across the
// project is run-seed -> epoch -> batch -> layer.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ kKeyTag, 0x243f6a8885a308d3ULL)) {}

    Rng split(std::uint64_t stream) const {
        Rng child(*this);
        child.key_ = mix(key_, 0x9e3779b97f4a7c15ULL + stream);
        child.counter_ = 0;
        return child;
    }

    std::uint64_t next_u64() { return mix(key_, counter_++); }

    // [0, 1), 24-bit mantissa resolution
    float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1p-24f; }

    double uniform_double() { return static_cast<double>(next_u64() >> 11) * 0x1p-53; }

    // Standard normal via Box-Muller; consumes two draws, returns one value.
    float normal() {
        double u1 = uniform_double();
        double u2 = uniform_double();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        return static_cast<float>(r * std::cos(6.283185307179586 * u2));
    }

    // Uniform integer in [0, bound) by rejection-free scaling (bound << 2^64).
    std::uint64_t next_below(std::uint64_t bound) {
        return static_cast<std::uint64_t>(uniform_double() * static_cast<double>(bound)) % bound;
    }

private:
    static constexpr std::uint64_t kKeyTag = 0x5851f42d4c957f2dULL;

    static std::uint64_t fmix(std::uint64_t h) {
        h ^= h >> 33;
        h *= 0xff51afd7ed558ccdULL;
        h ^= h >> 33;
        h *= 0xc4ceb9fe1a85ec53ULL;
        h ^= h >> 33;
        return h;
    }

    static std::uint64_t mix(std::uint64_t key, std::uint64_t ctr) {
        return fmix(key ^ fmix(ctr + 0x9e3779b97f4a7c15ULL));
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace vesselnet
