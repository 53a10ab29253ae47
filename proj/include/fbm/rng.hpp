#pragma once

// Portable random streams.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. The library's distribution objects are implementation-defined,
// so every transform below is written out explicitly to keep sample streams
// identical across toolchains.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace fbm {

/// SplitMix64 finalizer; used to derive well-separated stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

    /// Independent stream for a named purpose under a given seed.
    static Rng stream(std::uint64_t seed, std::string_view name) {
        return Rng(mix64(seed) ^ fnv1a(name));
    }

    /// Child stream; advances this generator by one draw.
    Rng split() { return Rng(engine_()); }

    std::uint64_t next() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on the open interval (0, 1).
    double uniform_open() { return (double(engine_() >> 12) + 0.5) * 0x1.0p-52; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via the Box-Muller transform (one draw per call).
    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    double exponential() { return -std::log(uniform_open()); }

    double laplace(double loc, double scale) {
        const double u = uniform_open() - 0.5;
        return loc - scale * std::copysign(1.0, u) * std::log1p(-2.0 * std::abs(u));
    }

    /// Marsaglia-Tsang gamma sampler with unit scale.
    double gamma(double shape) {
        if (shape < 1.0) {
            const double g = gamma(shape + 1.0);
            return g * std::pow(uniform_open(), 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = 0.0;
            double v = 0.0;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform_open();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        const double x = gamma(a);
        const double y = gamma(b);
        return x / (x + y);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace fbm
