// Copyright (c) 2026 The prefmoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random source. xoshiro256** seeded through splitmix64;
// identical seeds produce identical streams on every platform because no
// libm/libstdc++ distribution code is involved.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace prefmoe {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        // splitmix64 expansion of the seed into the xoshiro256** state.
        std::uint64_t x = seed;
        for (auto& word : state_) {
            word = splitmix64(x);
        }
    }

    std::uint64_t seed() const { return seed_; }

    /// Next raw 64-bit word (xoshiro256**).
    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) {
            return 0;
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    /// Standard normal via Box-Muller. The spare value is cached, so draws
    /// come in deterministic pairs.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // 1 - u keeps the argument of log strictly positive.
        const double u = 1.0 - uniform();
        const double v = uniform();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * v;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates shuffle (descending), consuming one draw per position.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent substream. Derivation uses the original seed and the
    /// stream index only, so forks do not depend on how much of this
    /// stream has been consumed: fork(k) = Rng(splitmix64(seed ^ golden*(k+1))).
    Rng fork(std::uint64_t stream) const {
        std::uint64_t x = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
        return Rng(splitmix64(x));
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::array<std::uint64_t, 4> state_{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace prefmoe
