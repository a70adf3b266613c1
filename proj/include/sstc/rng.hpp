#pragma once

// SplitMix64 stream with a Box–Muller normal sampler. Fixed algorithms so
// weight initialization reproduces bit-for-bit across builds.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "sstc/tensor.hpp"

namespace sstc {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

    std::uint64_t state() const noexcept { return state_; }

    std::uint64_t next_u64() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), n > 0. Lemire's multiply-shift with rejection.
    std::uint64_t below(std::uint64_t n) noexcept {
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] keeps the log finite
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Independent child stream; used to give each dataset sample its own seed.
    Rng split(std::uint64_t index) const noexcept {
        Rng mixer(state_ ^ (0xD1B54A32D192ED03ULL * (index + 1)));
        return Rng(mixer.next_u64());
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

template <typename T = double>
std::vector<T> rng_standard_normal(Rng& rng, std::size_t n) {
    std::vector<T> out(n);
    for (auto& v : out) v = static_cast<T>(rng.normal());
    return out;
}

/// Tensor of i.i.d. N(0, scale²) entries.
template <typename T>
Tensor<T> random_normal(Rng& rng, Shape shape, double scale = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
    return t;
}

}  // namespace sstc
