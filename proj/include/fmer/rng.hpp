#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace fmer {

// xoshiro256++ seeded through splitmix64. Value-semantic on purpose:
// copying an Rng snapshots the stream, which is how losses with internal
// randomness are replayed against finite-difference oracles.
class Rng {
public:
    Rng() : Rng(0, 0) {}
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
        for (auto& w : state_) w = splitmix(z);
        // avoid the all-zero state (cannot happen for any splitmix output run,
        // but cheap to guarantee)
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; no cached second sample so the state
    // is exactly the four words above
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793238462643 * u2);
    }

    double rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

    // unbiased integer in [0, n)
    std::int64_t below(std::int64_t n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t bound = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t r;
        do {
            r = next_u64();
        } while (r >= bound);
        return static_cast<std::int64_t>(r % un);
    }

    const std::array<std::uint64_t, 4>& state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    static std::uint64_t splitmix(std::uint64_t& s) {
        s += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = s;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::array<std::uint64_t, 4> state_;
};

}  // namespace fmer
