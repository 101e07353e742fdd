#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace advlab {

// splitmix64, the usual seed scrambler. All randomness in the library goes
// through Rng so results do not depend on the standard library's
// distribution implementations.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Folds several values into one derived seed. Used to give every
// (sample, attack, epoch, ...) its own independent stream.
inline uint64_t mix_seed(std::initializer_list<uint64_t> parts) {
    uint64_t s = 0x6a09e667f3bcc909ull;
    for (uint64_t p : parts) {
        s ^= p + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
        splitmix64(s);
        s = splitmix64(s);
    }
    return s;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // scramble so small seeds still give well-mixed streams
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0,1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t below(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller; second value of each pair is cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace advlab
