#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace awmp {

/// Deterministic random stream. All draws are derived from the raw 64-bit
/// engine output so that sequences depend only on the seed, not on the
/// standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller. Stateless (no cached second value),
    /// consumes exactly two engine outputs per draw.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Integer in [0, n). Bias from the float path is ~n/2^53, irrelevant here.
    std::size_t index(std::size_t n) {
        std::size_t i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
        return i < n ? i : n - 1;
    }

    std::uint64_t raw() { return gen_(); }

    /// Stable sub-stream seed: FNV-1a over the name mixed with the base seed
    /// through splitmix64. Lets independent consumers (env resets, action
    /// noise, batch sampling, ...) draw without perturbing each other.
    static std::uint64_t derive(std::uint64_t seed, std::string_view name) {
        std::uint64_t h = 1469598103934665603ULL;
        for (const char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        std::uint64_t z = seed ^ h;
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static Rng substream(std::uint64_t seed, std::string_view name) {
        return Rng(derive(seed, name));
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace awmp
