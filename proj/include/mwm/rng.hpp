#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace mwm {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// FNV-1a; stable across platforms and releases, unlike std::hash.
constexpr std::uint64_t stable_hash(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Per-item seed: master seed mixed with the item id.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view item_id) noexcept {
    return splitmix64(master ^ splitmix64(stable_hash(item_id)));
}

/// Thin wrapper over mt19937_64 (whose output sequence is fixed by the standard).
/// The std distributions are implementation-defined, so bounded integers and
/// unit reals are derived here to keep results identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform integer in [0, bound), rejection sampled.
    std::uint64_t below(std::uint64_t bound) {
        if (bound <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    /// Uniform double in [0, 1).
    double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = unit();
        while (u1 <= 0.0) u1 = unit();
        const double u2 = unit();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace mwm
