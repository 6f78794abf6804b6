#pragma once

#include <cstdint>
#include <random>

namespace tryflow {

// splitmix64 finalizer; used to spread user seeds and derive substreams.
uint64_t mix64(uint64_t x);

// Deterministic child seed for (seed, stream) pairs, e.g. per-record workers.
uint64_t derive_seed(uint64_t seed, uint64_t stream);

// Seeded generator with fixed output algorithms. The engine is mt19937_64
// (bit-exact by the standard); the transforms below are implemented here so
// results do not depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform();
    double uniform(double lo, double hi);

    // Standard normal via Box-Muller; consumes exactly two uniforms.
    double normal();
    double normal(double mean, double stddev);

    // Uniform integer in [0, n), n >= 1. Rejection sampling, no modulo bias.
    int uniform_int(int n);

    bool bernoulli(double p);

    // Independent substream derived from the original seed, not current state.
    Rng fork(uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

    uint64_t seed() const { return seed_; }
    uint64_t next_u64() { return engine_(); }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace tryflow
