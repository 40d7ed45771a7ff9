// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace kvtrim {

/// Deterministic random source. mt19937_64 output is fully specified by the
/// standard, and the double conversions below avoid std::uniform_real_distribution
/// (whose draw sequence is implementation-defined), so streams are bit-identical
/// across platforms for a given seed.
class DetRng {
public:
    explicit DetRng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform01();
    }

    /// Standard normal via Box-Muller (fixed evaluation order).
    double normal() {
        // uniform01() can return exactly 0; shift into (0, 1] for the log.
        const double u1 = 1.0 - uniform01();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return n == 0 ? 0 : engine_() % n;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace kvtrim
