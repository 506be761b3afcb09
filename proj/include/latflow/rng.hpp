#pragma once

#include <cmath>
#include <cstdint>

namespace latflow {

// Counter-based generator: output i of stream `key` is the SplitMix64 finalizer
// applied to key + (i+1)*GOLDEN. Stateless in principle, wrapped in a tiny
// counter so call sites stay terse. Chosen over std::mt19937 +
// std::normal_distribution because the latter is implementation-defined;
// this stream is bit-stable for a given seed on any conforming compiler.
inline std::uint64_t splitmix64_at(std::uint64_t key, std::uint64_t ctr) {
    std::uint64_t z = key + (ctr + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : key_(seed) {}

    std::uint64_t next_u64() { return splitmix64_at(key_, ctr_++); }

    // [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0,1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Beta(a, 1) via inverse CDF u^(1/a).
    double beta_a1(double a) {
        double u = uniform();
        if (u <= 0.0) return 0.0;
        return std::pow(u, 1.0 / a);
    }

    // Independent child stream; decorrelated from the parent by construction.
    Rng fork(std::uint64_t tag) const { return Rng(splitmix64_at(key_ ^ 0xA5A5A5A5A5A5A5A5ULL, tag)); }

  private:
    std::uint64_t key_;
    std::uint64_t ctr_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace latflow
