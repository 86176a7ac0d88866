#ifndef GLMEIV_RNG_HPP
#define GLMEIV_RNG_HPP

#include <cstdint>
#include <random>

namespace glmeiv {

// Counter-based stream derivation: each (seed, replicate, cell) key is mixed
// through splitmix64 into an independent generator state, so draws are
// reproducible regardless of task scheduling.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_key(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                             std::uint64_t c = 0) {
    std::uint64_t s = seed;
    std::uint64_t h = splitmix64(s);
    s ^= a + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(s);
    s ^= b + 0xd1b54a32d192ed03ULL;
    h ^= splitmix64(s);
    s ^= c + 0x8bb84b93962eacc9ULL;
    h ^= splitmix64(s);
    return h;
}

/// xoshiro256** seeded from a mixed key; satisfies UniformRandomBitGenerator.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t key) {
        std::uint64_t s = key;
        for (auto& word : state_) word = splitmix64(s);
    }
    Rng(std::uint64_t seed, std::uint64_t replicate, std::uint64_t stream = 0)
        : Rng(mix_key(seed, replicate, stream)) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return ~std::uint64_t{0}; }

    result_type operator()() {
        auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    double uniform() { return ((*this)() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        std::normal_distribution<double> d;
        return d(*this);
    }

    long poisson(double mean) {
        std::poisson_distribution<long> d(mean);
        return d(*this);
    }

    /// Gamma-Poisson mixture draw of NB with size s and mean mu.
    long neg_binomial(double mu, double size) {
        std::gamma_distribution<double> g(size, mu / size);
        return poisson(g(*this));
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_[4];
};

}  // namespace glmeiv

#endif
