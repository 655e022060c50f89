#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "npstream/error.hpp"

namespace npstream {

/**
 * Deterministic RNG used everywhere in the library.
 *
 * std::mt19937_64 has a pinned sequence, but the standard distributions do
 * not, so uniform/normal draws are implemented explicitly. The same seed
 * therefore produces the same stream on any platform/compiler, which is what
 * the --seed contract and the frozen test values rely on.
 */
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t raw() { return gen_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi < lo) throw ValueError("uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r;
        do {
            r = gen_();
        } while (r >= limit);
        return lo + static_cast<std::int64_t>(r % span);
    }

    // Box-Muller without a cached spare: one draw consumes two uniforms,
    // so interleaving normal and uniform draws stays reproducible.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    // Rejection-sampled truncated normal (lower bound only).
    double truncated_normal(double mean, double stddev, double lo, int max_tries = 100) {
        for (int i = 0; i < max_tries; ++i) {
            const double x = normal(mean, stddev);
            if (x >= lo) return x;
        }
        throw NumericError("truncated_normal: rejection cap reached");
    }

    // Child generator with a decorrelated seed; lets parallel loops own
    // independent deterministic streams derived from one master seed.
    Rng split() { return Rng(gen_() ^ 0x9e3779b97f4a7c15ull); }

private:
    std::mt19937_64 gen_;
};

}  // namespace npstream
