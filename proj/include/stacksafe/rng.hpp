#pragma once

#include <cstdint>

namespace stacksafe {

// Splittable counter-based generator (splitmix64 core). Every stochastic
// operation in the project takes one of these by value or reference so that
// campaigns replay bit-exactly from a root seed, including under parallelism:
// substreams are derived with `split` / `derive`, never by sharing state.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // Uniform in [0, n). n must be > 0.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Uniform in [0, 1).
    double unit() { return (next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    bool chance(double p) { return unit() < p; }

    // Child stream independent of future draws on this one.
    Rng split() { return Rng(next_u64() ^ 0xd1b54a32d192ed03ull); }

    // Keyed substream; does not advance this generator. Used to give each
    // (test, call site, variant) its own deterministic stream.
    Rng derive(uint64_t key) const {
        Rng r(state_ ^ (key * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull));
        r.next_u64();
        return r;
    }

    uint64_t state() const { return state_; }

private:
    uint64_t state_;
};

} // namespace stacksafe
