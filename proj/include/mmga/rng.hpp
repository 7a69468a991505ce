#pragma once

// Seed derivation and sampling primitives. Distributions are spelled out
// here (instead of <random>'s distribution classes) so that streams are
// identical across standard library implementations.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mmga {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Child seed for entity `index` (user id, step index, ...) of a master seed.
constexpr std::uint64_t subseed(std::uint64_t master, std::uint64_t index) {
    return mix64(master ^ index);
}

/// Named independent stream of a seed (tags keep e.g. edge and post draws apart).
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
    return mix64(mix64(seed) ^ tag);
}

namespace streams {
inline constexpr std::uint64_t kEdges = 0x45444745ULL;
inline constexpr std::uint64_t kPosts = 0x504F5354ULL;
inline constexpr std::uint64_t kStats = 0x53544154ULL;
inline constexpr std::uint64_t kTopics = 0x544F5049ULL;
inline constexpr std::uint64_t kPopularity = 0x504F5055ULL;
inline constexpr std::uint64_t kSteps = 0x53544550ULL;
inline constexpr std::uint64_t kInit = 0x494E4954ULL;
inline constexpr std::uint64_t kSplit = 0x53504C54ULL;
}  // namespace streams

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection-sampled (unbiased).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: empty range");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (one draw per call).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
        }
    }

    /// Index drawn from unnormalized non-negative weights (linear scan over cdf).
    std::size_t categorical(const std::vector<double>& cdf) {
        const double u = uniform() * cdf.back();
        std::size_t lo = 0;
        std::size_t hi = cdf.size() - 1;
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            if (cdf[mid] > u) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        return lo;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace mmga
