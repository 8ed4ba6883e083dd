#pragma once

#include <cmath>
#include <cstdint>

namespace mvlab {

// splitmix64 finalizer: the standard bijective mixer.
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based generator: every draw is a pure function of
// (seed, stream, substream, counter). Parallel scheduling therefore cannot
// change any result, and common random numbers across Picard iterates fall
// out of reusing the same keys.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream = 0)
        : key_(derive_key(seed, stream, substream)) {}

    // uniform in (0,1), never exactly 0 or 1
    double uniform() {
        const std::uint64_t x = next();
        return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
    }

    // standard normal, Box-Muller with the sine partner cached
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    std::uint64_t next() { return mix64(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    static std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream,
                                    std::uint64_t substream) {
        std::uint64_t k = mix64(seed ^ 0x6a09e667f3bcc909ULL);
        k = mix64(k ^ (stream * 0x9e3779b97f4a7c15ULL));
        k = mix64(k ^ (substream * 0xd1b54a32d192ed03ULL));
        return k;
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Fixed substream layout used by the simulator so that tests can reproduce
// individual draws: substream 0 is the initial sample, noise for step k
// lives at substream k+1.
inline CounterRng init_rng(std::uint64_t seed, std::uint64_t particle) {
    return CounterRng(seed, particle, 0);
}
inline CounterRng noise_rng(std::uint64_t seed, std::uint64_t particle, std::uint64_t step) {
    return CounterRng(seed, particle, step + 1);
}

} // namespace mvlab
