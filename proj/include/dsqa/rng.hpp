#pragma once

#include <cmath>
#include <cstdint>

#include "dsqa/common.hpp"

namespace dsqa {

// Counter-based stream: the value at a position is a pure function of
// (seed, position), so state serializes as two integers and the sequence
// is identical on every platform.
class RngState {
public:
    RngState() = default;
    explicit RngState(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t position() const { return position_; }
    void restore(std::uint64_t seed, std::uint64_t position) {
        seed_ = seed;
        position_ = position;
    }

    std::uint64_t next_u64() {
        ++position_;
        return mix64(seed_ + 0x9E3779B97F4A7C15ULL * position_);
    }

    // Uniform in [0, 1), 53 bits of mantissa.
    double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Box-Muller; consumes exactly two positions per draw.
    double gaussian() {
        double u1 = u01();
        double u2 = u01();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    bool bernoulli(double p) { return u01() < p; }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ConfigError("RngState::below: n must be positive");
        auto v = static_cast<std::uint64_t>(u01() * static_cast<double>(n));
        return v >= n ? n - 1 : v;
    }

    // Independent child stream for a named purpose (data shuffling etc.).
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t salt) {
        return mix64(mix64(seed ^ 0xD1B54A32D192ED03ULL) + salt);
    }

private:
    static std::uint64_t mix64(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ULL;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBULL;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t seed_ = 0;
    std::uint64_t position_ = 0;
};

} // namespace dsqa
