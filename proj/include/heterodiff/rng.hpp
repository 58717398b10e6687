#pragma once
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>

namespace hd {

// splitmix64 finalizer; used to derive child-stream seeds
inline uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ull * (b + 0x2545f4914f6cdd1dull);
    x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27; x *= 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic random source. mt19937_64 itself is pinned by the standard, but the
// std:: distributions are implementation-defined, so every transform we rely on is
// written out here and never changes behind our back.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : seed_(seed), eng_(seed) {}

    uint64_t seed() const { return seed_; }

    // uniform in [0, 1), 53 bits
    double u01() { return double(eng_() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        // rejection sampling to avoid modulo bias
        uint64_t bound = ~uint64_t(0) - ~uint64_t(0) % uint64_t(n);
        uint64_t r;
        do { r = eng_(); } while (r >= bound);
        return int(r % uint64_t(n));
    }

    // Box-Muller; uncached so the state is exactly the engine state
    double normal(double mean = 0.0, double std = 1.0) {
        double u1 = 1.0 - u01();   // (0, 1]
        double u2 = u01();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + std * r * std::cos(2.0 * M_PI * u2);
    }

    // draw an index from non-negative (unnormalised) weights by CDF inversion
    template <class T>
    int categorical(std::span<const T> w) {
        double total = 0.0;
        for (T v : w) total += double(v);
        if (!(total > 0.0)) throw std::runtime_error("categorical: weights sum to zero");
        double x = u01() * total, cum = 0.0;
        int last = -1;
        for (size_t i = 0; i < w.size(); ++i) {
            if (!(w[i] > 0)) continue;
            last = int(i);
            cum += double(w[i]);
            if (x < cum) return last;
        }
        return last;   // x landed in the round-off tail
    }

    // child stream derived from (seed, stream); independent of parent usage
    Rng fork(uint64_t stream) const { return Rng(mix64(seed_, stream)); }

    std::string state() const {
        std::ostringstream os;
        os << seed_ << ' ' << eng_;
        return os.str();
    }
    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> seed_ >> eng_;
        if (!is) throw std::runtime_error("Rng::restore: bad state string");
    }

private:
    uint64_t seed_;
    std::mt19937_64 eng_;
};

}  // namespace hd
